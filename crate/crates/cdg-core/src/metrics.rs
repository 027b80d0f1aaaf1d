//! Discrete inner products for the channel-directed metrics.
//!
//! These exist to verify the defining gradient relation (duality): for a raw
//! gradient `f` and its preconditioned image `g` under a metric `m`,
//! `ip_m(g, k) == ip_h0(f, k)` for every perturbation `k`. The discrete
//! conventions here are chosen so that the identity holds exactly for the
//! operators in [`crate::precondition`], not just asymptotically:
//!
//! * the channel-mean term is the plain elementwise sum of the broadcast
//!   means (so it carries a factor of `O` relative to a per-slice integral);
//! * the derivative term uses the periodic forward difference with unit
//!   index spacing, weighted by `lambda * O^2`.
//!
//! Discrete summation by parts is exact for periodic differences, which
//! makes `ip_tilde_h1` the exact dual of the circulant system solved by
//! `sobolev_tilde_h1`.

use crate::error::{Error, Result};
use crate::tensor::Tensor4;

fn check_same_dims(k1: &Tensor4, k2: &Tensor4) -> Result<()> {
    if k1.dims() != k2.dims() {
        return Err(Error::invalid(format!(
            "dimension mismatch: {:?} vs {:?}",
            k1.dims(),
            k2.dims()
        )));
    }
    Ok(())
}

fn check_lambda(lambda: f64) -> Result<()> {
    if !(lambda > 0.0) {
        return Err(Error::invalid(format!("lambda must be > 0, got {}", lambda)));
    }
    Ok(())
}

/// Flat inner product: sum of elementwise products, unit measure per index.
pub fn ip_h0(k1: &Tensor4, k2: &Tensor4) -> Result<f64> {
    check_same_dims(k1, k2)?;
    k1.dot(k2)
}

/// Re-weighted flat metric: mean term plus `lambda` times the inner product
/// of the deformations (residuals after removing the channel mean).
pub fn ip_h0_lambda(k1: &Tensor4, k2: &Tensor4, lambda: f64) -> Result<f64> {
    check_same_dims(k1, k2)?;
    check_lambda(lambda)?;
    let m1 = k1.channel_mean();
    let m2 = k2.channel_mean();
    let d1 = k1.sub(&m1)?;
    let d2 = k2.sub(&m2)?;
    Ok(m1.dot(&m2)? + lambda * d1.dot(&d2)?)
}

/// Channel-directed Sobolev metric: mean term plus `lambda * O^2` times the
/// inner product of periodic forward differences along the output axis.
pub fn ip_tilde_h1(k1: &Tensor4, k2: &Tensor4, lambda: f64) -> Result<f64> {
    check_same_dims(k1, k2)?;
    check_lambda(lambda)?;
    let o = k1.outer();
    if o < 2 {
        return Err(Error::invalid(format!(
            "tilde-H1 metric needs at least 2 output channels, got {}",
            o
        )));
    }
    let m1 = k1.channel_mean();
    let m2 = k2.channel_mean();
    let mean_term = m1.dot(&m2)?;

    let s = k1.slice_len();
    let a = k1.data();
    let b = k2.data();
    let mut diff_term = 0.0;
    for ch in 0..o {
        let next = (ch + 1) % o;
        let (a0, a1) = (&a[ch * s..(ch + 1) * s], &a[next * s..(next + 1) * s]);
        let (b0, b1) = (&b[ch * s..(ch + 1) * s], &b[next * s..(next + 1) * s]);
        for j in 0..s {
            diff_term += (a1[j] - a0[j]) * (b1[j] - b0[j]);
        }
    }
    let o2 = (o * o) as f64;
    Ok(mean_term + lambda * o2 * diff_term)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(dims: [usize; 4], seed: u64) -> Tensor4 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor4::from_fn(dims, |_, _, _, _| rng.gen_range(-1.0..1.0)).unwrap()
    }

    #[test]
    fn ip_h0_of_ones() {
        let k = Tensor4::new([2, 1, 1, 1], vec![1.0, 1.0]).unwrap();
        assert_eq!(ip_h0(&k, &k).unwrap(), 2.0);
    }

    #[test]
    fn ip_h0_orthogonal_pair() {
        let a = Tensor4::new([2, 1, 1, 1], vec![1.0, -1.0]).unwrap();
        let b = Tensor4::new([2, 1, 1, 1], vec![1.0, 1.0]).unwrap();
        assert_eq!(ip_h0(&a, &b).unwrap(), 0.0);
    }

    #[test]
    fn ip_h0_matches_summation_oracle() {
        let a = random_tensor([8, 2, 3, 3], 1);
        let b = random_tensor([8, 2, 3, 3], 2);
        let mut expect = 0.0;
        for (x, y) in a.data().iter().zip(b.data()) {
            expect += x * y;
        }
        assert!((ip_h0(&a, &b).unwrap() - expect).abs() <= 1e-12);
    }

    #[test]
    fn ip_h0_rejects_dim_mismatch() {
        let a = Tensor4::zeros([2, 1, 1, 1]).unwrap();
        let b = Tensor4::zeros([3, 1, 1, 1]).unwrap();
        assert!(ip_h0(&a, &b).is_err());
    }

    #[test]
    fn reweighted_at_lambda_one_is_flat() {
        let a = random_tensor([4, 3, 2, 2], 3);
        let b = random_tensor([4, 3, 2, 2], 4);
        let flat = ip_h0(&a, &b).unwrap();
        let rw = ip_h0_lambda(&a, &b, 1.0).unwrap();
        assert!((flat - rw).abs() <= 1e-12 * flat.abs().max(1.0));
    }

    #[test]
    fn reweighted_constant_along_o_ignores_lambda() {
        let k = Tensor4::from_fn([5, 2, 2, 1], |_, i, h, _| (i * 2 + h) as f64 + 0.5).unwrap();
        let v1 = ip_h0_lambda(&k, &k, 0.3).unwrap();
        let v2 = ip_h0_lambda(&k, &k, 7.0).unwrap();
        assert!((v1 - v2).abs() <= 1e-12 * v1.abs());
    }

    #[test]
    fn reweighted_matches_decompose_and_sum_oracle() {
        let a = random_tensor([4, 2, 2, 2], 5);
        let b = random_tensor([4, 2, 2, 2], 6);
        let lambda = 2.0;
        // Independent oracle: explicit per-element decomposition.
        let s = a.slice_len();
        let o = a.outer();
        let mut mean_a = vec![0.0; s];
        let mut mean_b = vec![0.0; s];
        for ch in 0..o {
            for j in 0..s {
                mean_a[j] += a.data()[ch * s + j] / o as f64;
                mean_b[j] += b.data()[ch * s + j] / o as f64;
            }
        }
        let mut expect = 0.0;
        for ch in 0..o {
            for j in 0..s {
                expect += mean_a[j] * mean_b[j];
                expect += lambda
                    * (a.data()[ch * s + j] - mean_a[j])
                    * (b.data()[ch * s + j] - mean_b[j]);
            }
        }
        let got = ip_h0_lambda(&a, &b, lambda).unwrap();
        assert!((got - expect).abs() <= 1e-12 * expect.abs().max(1.0));
    }

    #[test]
    fn reweighted_rejects_bad_lambda() {
        let k = Tensor4::zeros([2, 1, 1, 1]).unwrap();
        assert!(ip_h0_lambda(&k, &k, 0.0).is_err());
        assert!(ip_h0_lambda(&k, &k, -1.0).is_err());
    }

    #[test]
    fn tilde_h1_constant_pair_reduces_to_mean_term() {
        let k = Tensor4::from_fn([4, 2, 1, 1], |_, i, _, _| i as f64 + 1.0).unwrap();
        let got = ip_tilde_h1(&k, &k, 3.0).unwrap();
        let mean = k.channel_mean();
        let expect = mean.dot(&mean).unwrap();
        assert!((got - expect).abs() <= 1e-12 * expect);
    }

    #[test]
    fn tilde_h1_hand_value() {
        // k1 = k2 = [1, -1] along O with the other dims trivial, lambda = 1:
        // mean term 0, forward differences [-2, 2], so 1 * 2^2 * 8 = 32.
        let k = Tensor4::new([2, 1, 1, 1], vec![1.0, -1.0]).unwrap();
        let got = ip_tilde_h1(&k, &k, 1.0).unwrap();
        assert!((got - 32.0).abs() <= 1e-12);
    }

    #[test]
    fn tilde_h1_is_bilinear_in_first_argument() {
        let a = random_tensor([6, 2, 2, 1], 8);
        let b = random_tensor([6, 2, 2, 1], 9);
        let alpha = 2.75;
        let mut scaled = a.clone();
        scaled.scale(alpha);
        let lhs = ip_tilde_h1(&scaled, &b, 0.7).unwrap();
        let rhs = alpha * ip_tilde_h1(&a, &b, 0.7).unwrap();
        assert!((lhs - rhs).abs() <= 1e-12 * rhs.abs().max(1.0));
    }

    #[test]
    fn tilde_h1_rejects_single_channel_and_bad_lambda() {
        let k = Tensor4::zeros([1, 4, 1, 1]).unwrap();
        assert!(ip_tilde_h1(&k, &k, 1.0).is_err());
        let k2 = Tensor4::zeros([2, 4, 1, 1]).unwrap();
        assert!(ip_tilde_h1(&k2, &k2, 0.0).is_err());
    }

    #[test]
    fn metrics_are_positive_definite_on_random_tensors() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for trial in 0..1000 {
            let dims = [
                rng.gen_range(2..7),
                rng.gen_range(1..4),
                rng.gen_range(1..4),
                rng.gen_range(1..4),
            ];
            let k = Tensor4::from_fn(dims, |_, _, _, _| rng.gen_range(-1.0..1.0)).unwrap();
            if k.norm_l2() == 0.0 {
                continue;
            }
            let lambda = [0.1, 1.0, 10.0][trial % 3];
            assert!(ip_h0(&k, &k).unwrap() > 0.0);
            assert!(ip_h0_lambda(&k, &k, lambda).unwrap() > 0.0);
            assert!(ip_tilde_h1(&k, &k, lambda).unwrap() > 0.0);
        }
    }
}
