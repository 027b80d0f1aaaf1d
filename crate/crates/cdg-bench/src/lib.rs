//! Shared helpers for the benchmark targets.

use cdg_core::Tensor4;

/// Deterministic filler tensor; benches need stable inputs, not randomness
/// from run to run.
pub fn bench_tensor(dims: [usize; 4]) -> Tensor4 {
    Tensor4::from_fn(dims, |o, i, h, w| {
        ((o * 31 + i * 17 + h * 7 + w * 3) as f64 * 0.137).sin()
    })
    .expect("valid dims")
}
