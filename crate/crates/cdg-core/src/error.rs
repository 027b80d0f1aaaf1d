//! Error type shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A caller-supplied value violates a precondition (bad dimension,
    /// non-positive smoothing weight, mismatched shapes, ...).
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A file or byte stream could not be decoded; the message names the
    /// offending field.
    #[error("parse error: {0}")]
    Parse(String),

    /// A statistic has no defined value for the given input (for example a
    /// correlation over slices that are all constant).
    #[error("undefined result: {0}")]
    UndefinedResult(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
