//! Channel-directed gradient preconditioning for rank-4 parameter tensors.
//!
//! The crate turns a raw (flat-metric) gradient into the gradient of the
//! same loss under a channel-directed metric: a re-weighted flat metric
//! that separates the channel-mean component from the residual, or Sobolev
//! metrics whose gradients solve second-order periodic systems along the
//! output-channel axis — i.e. they smooth the gradient across output
//! channels. All solves run in time linear in the channel count.
//!
//! On top of the operators sit exact small-scale oracles ([`verify`]), SGD
//! and Adam steppers that consume preconditioned gradients ([`optim`]), a
//! manually differentiated two-layer CNN with IDX data ingestion ([`nn`],
//! [`data`]), tensor-regularity measurements ([`analysis`]), and the
//! experiment driver behind the `cdg` CLI ([`harness`]).

pub mod analysis;
pub mod data;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod precondition;
pub mod tensor;
pub mod verify;

pub use error::{Error, Result};
pub use precondition::{precondition, Axis, Metric, PrecondConfig};
pub use tensor::Tensor4;
