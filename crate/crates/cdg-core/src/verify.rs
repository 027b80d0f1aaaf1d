//! Verification suites and the dense oracles they check against.
//!
//! The oracles here deliberately avoid the fast paths: linear systems are
//! solved by dense Gaussian elimination on explicitly assembled matrices,
//! and `D2` is applied index-by-index. Each suite reports a pass flag plus a
//! human-readable summary; the `verify` CLI subcommand prints one line per
//! suite.

use std::time::{Duration, Instant};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::fixture;
use crate::error::{Error, Result};
use crate::metrics::{ip_h0, ip_h0_lambda, ip_tilde_h1};
use crate::nn::{
    backward_into, forward_into, init_params, loss_from_workspace, Batch, ModelArrays,
    NnWorkspace, PARAM_NAMES,
};
use crate::precondition::{
    conv_oracle, kernel_k, kernel_k_green, kernel_ktilde, laplacian_rasterized, precondition,
    reweighted_h0, reweighted_h0_code_variant, sobolev_h1, sobolev_tilde_h1, Metric,
    PrecondConfig,
};
use crate::tensor::Tensor4;

pub const DUALITY_TOL: f64 = 1e-9;
pub const RESIDUAL_TOL: f64 = 1e-10;
pub const ORACLE_TOL: f64 = 1e-9;
pub const ORACLE_CHANNELS: [usize; 5] = [2, 3, 8, 64, 257];
pub const KERNEL_CHANNELS: [usize; 3] = [64, 128, 256];
pub const KERNEL_GAP_AT_LARGEST: f64 = 0.02;
pub const GRADCHECK_RTOL: f64 = 1e-5;
/// Denominator floor of the relative error; together with the rtol this is
/// an absolute floor of 1e-8 for near-zero gradient coordinates.
pub const GRADCHECK_SCALE_FLOOR: f64 = 1e-3;
pub const GRADCHECK_FD_STEP: f64 = 1e-4;

// ---------------------------------------------------------------------------
// Dense oracles
// ---------------------------------------------------------------------------

/// Gaussian elimination with partial pivoting; panics on a singular matrix
/// (oracle-only code).
pub fn dense_solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
    let n = b.len();
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| a[i][col].abs().partial_cmp(&a[j][col].abs()).unwrap())
            .unwrap();
        a.swap(col, pivot);
        b.swap(col, pivot);
        let p = a[col][col];
        assert!(p.abs() > 1e-300, "singular matrix in dense_solve");
        for row in col + 1..n {
            let factor = a[row][col] / p;
            if factor == 0.0 {
                continue;
            }
            for k in col..n {
                a[row][k] -= factor * a[col][k];
            }
            b[row] -= factor * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let mut acc = b[row];
        for k in row + 1..n {
            acc -= a[row][k] * x[k];
        }
        x[row] = acc / a[row][row];
    }
    x
}

/// Periodic second-difference matrix of size `n`.
fn d2_matrix(n: usize) -> Vec<Vec<f64>> {
    let mut m = vec![vec![0.0; n]; n];
    for j in 0..n {
        m[j][j] -= 2.0;
        m[j][(j + 1) % n] += 1.0;
        m[j][(j + n - 1) % n] += 1.0;
    }
    m
}

fn for_each_fiber(f: &Tensor4, mut solve: impl FnMut(Vec<f64>) -> Vec<f64>) -> Tensor4 {
    let o = f.outer();
    let s = f.slice_len();
    let mut out = f.clone();
    for r in 0..s {
        let fiber: Vec<f64> = (0..o).map(|ch| f.data()[ch * s + r]).collect();
        let solved = solve(fiber);
        for (ch, v) in solved.into_iter().enumerate() {
            out.data_mut()[ch * s + r] = v;
        }
    }
    out
}

/// Dense reference for [`sobolev_h1`]: assemble `I - lambda*O^2*D2` per
/// fiber and solve it by elimination.
pub fn dense_sobolev_h1(f: &Tensor4, lambda: f64) -> Tensor4 {
    let o = f.outer();
    if o < 2 {
        return f.clone();
    }
    let c = lambda * (o * o) as f64;
    let d2 = d2_matrix(o);
    let mut a = vec![vec![0.0; o]; o];
    for j in 0..o {
        for k in 0..o {
            a[j][k] = -c * d2[j][k];
        }
        a[j][j] += 1.0;
    }
    for_each_fiber(f, |fiber| dense_solve(a.clone(), fiber))
}

/// Dense reference for [`sobolev_tilde_h1`]: the operator is the mean
/// projection minus `lambda*O^2*D2`, which is invertible.
pub fn dense_sobolev_tilde_h1(f: &Tensor4, lambda: f64) -> Tensor4 {
    let o = f.outer();
    if o < 2 {
        return f.clone();
    }
    let c = lambda * (o * o) as f64;
    let d2 = d2_matrix(o);
    let mut a = vec![vec![0.0; o]; o];
    for j in 0..o {
        for k in 0..o {
            a[j][k] = 1.0 / o as f64 - c * d2[j][k];
        }
    }
    for_each_fiber(f, |fiber| dense_solve(a.clone(), fiber))
}

/// Dense reference for [`laplacian_rasterized`].
pub fn dense_laplacian(f: &Tensor4, sigma: f64) -> Tensor4 {
    let n = f.len();
    if n < 2 {
        return f.clone();
    }
    let d2 = d2_matrix(n);
    let mut a = vec![vec![0.0; n]; n];
    for j in 0..n {
        for k in 0..n {
            a[j][k] = -sigma * d2[j][k];
        }
        a[j][j] += 1.0;
    }
    let solved = dense_solve(a, f.data().to_vec());
    Tensor4::new(f.dims(), solved).unwrap()
}

/// Index-by-index application of the periodic second difference along
/// axis 0, independent of the solver code paths.
pub fn d2_apply(g: &Tensor4) -> Tensor4 {
    let o = g.outer();
    let s = g.slice_len();
    Tensor4::from_fn(g.dims(), |ch, i, h, w| {
        let r = ((i * g.dims()[2]) + h) * g.dims()[3] + w;
        let up = g.data()[((ch + o - 1) % o) * s + r];
        let dn = g.data()[((ch + 1) % o) * s + r];
        up - 2.0 * g.data()[ch * s + r] + dn
    })
    .unwrap()
}

// ---------------------------------------------------------------------------
// Suite plumbing
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct SuiteReport {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone)]
pub struct VerifyConfig {
    pub seed: u64,
    pub lambdas: Vec<f64>,
    pub duality_trials: usize,
    pub descent_trials: usize,
    pub gradcheck_coords: usize,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        VerifyConfig {
            seed: 7,
            lambdas: vec![0.1, 1.0, 10.0],
            duality_trials: 1000,
            descent_trials: 1000,
            gradcheck_coords: 200,
        }
    }
}

impl VerifyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambdas.is_empty() {
            return Err(Error::invalid("lambda list is empty"));
        }
        if let Some(&bad) = self.lambdas.iter().find(|&&l| !(l > 0.0) || !l.is_finite()) {
            return Err(Error::invalid(format!("lambda must be > 0, got {}", bad)));
        }
        if self.duality_trials == 0 || self.descent_trials == 0 || self.gradcheck_coords == 0 {
            return Err(Error::invalid("trial counts must be positive"));
        }
        Ok(())
    }
}

pub const SUITE_NAMES: [&str; 6] = [
    "duality", "residual", "oracle", "kernel", "descent", "gradcheck",
];

fn random_dims(rng: &mut ChaCha8Rng, min_o: usize) -> [usize; 4] {
    [
        rng.gen_range(min_o..9),
        rng.gen_range(1..4),
        rng.gen_range(1..4),
        rng.gen_range(1..3),
    ]
}

fn random_tensor(rng: &mut ChaCha8Rng, dims: [usize; 4]) -> Tensor4 {
    Tensor4::from_fn(dims, |_, _, _, _| rng.gen_range(-1.0..1.0)).unwrap()
}

// ---------------------------------------------------------------------------
// Suites
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct DualityResult {
    pub trials: usize,
    pub max_gap: f64,
}

impl DualityResult {
    pub fn passed(&self) -> bool {
        self.max_gap <= DUALITY_TOL
    }
}

/// Checks the defining relation: the metric inner product of the
/// preconditioned gradient with any perturbation equals the flat inner
/// product of the raw gradient with it.
pub fn suite_duality(cfg: &VerifyConfig) -> Result<DualityResult> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut max_gap = 0.0f64;
    for trial in 0..cfg.duality_trials {
        let dims = random_dims(&mut rng, 2);
        let f = random_tensor(&mut rng, dims);
        let k = random_tensor(&mut rng, dims);
        let lambda = cfg.lambdas[trial % cfg.lambdas.len()];
        let scale = f.norm_l2() * k.norm_l2();
        if scale == 0.0 {
            continue;
        }
        let flat = ip_h0(&f, &k)?;

        let g_rw = reweighted_h0(&f, lambda)?;
        let gap_rw = (ip_h0_lambda(&g_rw, &k, lambda)? - flat).abs() / scale;

        let g_th = sobolev_tilde_h1(&f, lambda)?;
        let gap_th = (ip_tilde_h1(&g_th, &k, lambda)? - flat).abs() / scale;

        max_gap = max_gap.max(gap_rw).max(gap_th);
    }
    Ok(DualityResult {
        trials: cfg.duality_trials,
        max_gap,
    })
}

#[derive(Debug, Clone)]
pub struct ResidualResult {
    pub max_h1: f64,
    pub max_tilde: f64,
}

impl ResidualResult {
    pub fn passed(&self) -> bool {
        self.max_h1 <= RESIDUAL_TOL && self.max_tilde <= RESIDUAL_TOL
    }
}

/// Residuals of the two Sobolev systems in their defining discrete form.
pub fn suite_residual(cfg: &VerifyConfig) -> Result<ResidualResult> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x51);
    let mut max_h1 = 0.0f64;
    let mut max_tilde = 0.0f64;
    for &o in &ORACLE_CHANNELS {
        for &lambda in &cfg.lambdas {
            let f = random_tensor(&mut rng, [o, 3, 1, 1]);
            let c = lambda * (o * o) as f64;
            let fnorm = f.norm_l2();

            let g = sobolev_h1(&f, lambda)?;
            let mut lhs = g.clone();
            lhs.add_scaled(&d2_apply(&g), -c)?;
            max_h1 = max_h1.max(lhs.sub(&f)?.norm_l2() / fnorm);

            let g = sobolev_tilde_h1(&f, lambda)?;
            let mut lhs = f.channel_mean();
            lhs.add_scaled(&d2_apply(&g), -c)?;
            max_tilde = max_tilde.max(lhs.sub(&f)?.norm_l2() / fnorm);
        }
    }
    Ok(ResidualResult { max_h1, max_tilde })
}

#[derive(Debug, Clone)]
pub struct OracleResult {
    pub max_rel_tilde: f64,
    pub max_rel_h1: f64,
    pub elapsed: Duration,
}

impl OracleResult {
    pub fn passed(&self) -> bool {
        self.max_rel_tilde <= ORACLE_TOL && self.max_rel_h1 <= ORACLE_TOL
    }
}

/// Fast solver outputs against dense Gaussian elimination, 20 random fibers
/// per channel count and smoothness level.
pub fn suite_oracle(cfg: &VerifyConfig) -> Result<OracleResult> {
    cfg.validate()?;
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x0C);
    let mut max_rel_tilde = 0.0f64;
    let mut max_rel_h1 = 0.0f64;
    for &o in &ORACLE_CHANNELS {
        for &lambda in &cfg.lambdas {
            let f = random_tensor(&mut rng, [o, 20, 1, 1]);
            let fast = sobolev_tilde_h1(&f, lambda)?;
            let dense = dense_sobolev_tilde_h1(&f, lambda);
            max_rel_tilde =
                max_rel_tilde.max(fast.sub(&dense)?.norm_l2() / dense.norm_l2());

            let fast = sobolev_h1(&f, lambda)?;
            let dense = dense_sobolev_h1(&f, lambda);
            max_rel_h1 = max_rel_h1.max(fast.sub(&dense)?.norm_l2() / dense.norm_l2());
        }
    }
    Ok(OracleResult {
        max_rel_tilde,
        max_rel_h1,
        elapsed: start.elapsed(),
    })
}

#[derive(Debug, Clone)]
pub struct KernelResult {
    /// `(O, relative L2 gap)` between the sampled-kernel convolution and the
    /// linear-time solve, at lambda = 1.
    pub tilde_gaps: Vec<(usize, f64)>,
    /// Relative L2 distance of the discrete Green's row from the printed
    /// closed-form kernel.
    pub printed_gap: f64,
    /// Same distance from the unit-mass Green's-function normalization.
    pub green_gap: f64,
}

impl KernelResult {
    pub fn passed(&self) -> bool {
        let decreasing = self
            .tilde_gaps
            .windows(2)
            .all(|w| w[1].1 < w[0].1);
        decreasing
            && self
                .tilde_gaps
                .last()
                .map(|&(_, gap)| gap <= KERNEL_GAP_AT_LARGEST)
                .unwrap_or(false)
    }

    /// Which closed form the discrete Green's row actually matches.
    pub fn matches_green_form(&self) -> bool {
        self.green_gap < self.printed_gap
    }
}

/// Continuum-kernel cross-checks: the sampled closed-form kernel applied by
/// dense circular convolution must converge to the discrete solve as the
/// channel count grows, and the discrete Green's row of the plain Sobolev
/// system is compared against both printed and unit-mass kernel forms.
pub fn suite_kernel(cfg: &VerifyConfig) -> Result<KernelResult> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x6b);
    let lambda = 1.0;
    let mut tilde_gaps = Vec::new();
    for &o in &KERNEL_CHANNELS {
        let f = random_tensor(&mut rng, [o, 8, 1, 1]);
        let kernel: Vec<f64> = (0..o)
            .map(|d| kernel_ktilde(d as f64 / o as f64, lambda).unwrap())
            .collect();
        let conv = conv_oracle(&f, &kernel)?;
        let solve = sobolev_tilde_h1(&f, lambda)?;
        tilde_gaps.push((o, conv.sub(&solve)?.norm_l2() / solve.norm_l2()));
    }

    // Discrete Green's row of (I - lambda*O^2*D2): the response to a unit
    // impulse in channel 0, compared with (1/O) * K(d/O) for both forms.
    let o = *KERNEL_CHANNELS.last().unwrap();
    let mut delta = Tensor4::zeros([o, 1, 1, 1])?;
    delta.data_mut()[0] = 1.0;
    let row = sobolev_h1(&delta, lambda)?;
    let mut printed = Vec::with_capacity(o);
    let mut green = Vec::with_capacity(o);
    for d in 0..o {
        let x = d as f64 / o as f64;
        printed.push(kernel_k(x, lambda)? / o as f64);
        green.push(kernel_k_green(x, lambda)? / o as f64);
    }
    let norm = row.norm_l2();
    let gap_to = |form: &[f64]| {
        let sq: f64 = row
            .data()
            .iter()
            .zip(form)
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        sq.sqrt() / norm
    };
    Ok(KernelResult {
        tilde_gaps,
        printed_gap: gap_to(&printed),
        green_gap: gap_to(&green),
    })
}

#[derive(Debug, Clone, Default)]
pub struct DescentResult {
    pub positivity_trials: usize,
    pub failures: Vec<String>,
}

impl DescentResult {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

/// Operator invariants: descent positivity, linearity, mean preservation,
/// constant invariance, and smoothing monotonicity.
pub fn suite_descent(cfg: &VerifyConfig) -> Result<DescentResult> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xde);
    let mut result = DescentResult::default();

    // Positivity of <f, P f> for every metric and smoothness level.
    for &lambda in &cfg.lambdas {
        for metric in Metric::ALL {
            let cfg_p = PrecondConfig {
                metric,
                lambda,
                sigma: lambda,
                ..Default::default()
            };
            for _ in 0..cfg.descent_trials {
                let dims = random_dims(&mut rng, 1);
                let f = random_tensor(&mut rng, dims);
                if f.norm_l2() == 0.0 {
                    continue;
                }
                result.positivity_trials += 1;
                let g = precondition(&f, &cfg_p)?;
                let ip = f.dot(&g)?;
                if !(ip > 0.0) {
                    result.failures.push(format!(
                        "positivity: metric {} lambda {} ip {}",
                        metric, lambda, ip
                    ));
                }
            }
        }
    }

    // Linearity to 1e-10 relative.
    for trial in 0..50 {
        let dims = random_dims(&mut rng, 2);
        let a = random_tensor(&mut rng, dims);
        let b = random_tensor(&mut rng, dims);
        let (ca, cb) = (rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0));
        let lambda = cfg.lambdas[trial % cfg.lambdas.len()];
        let ops: [(&str, fn(&Tensor4, f64) -> Result<Tensor4>); 5] = [
            ("reweighted_h0", reweighted_h0),
            ("code_variant", reweighted_h0_code_variant),
            ("sobolev_h1", sobolev_h1),
            ("sobolev_tilde_h1", sobolev_tilde_h1),
            ("laplacian", laplacian_rasterized),
        ];
        let mut combo = a.clone();
        combo.scale(ca);
        combo.add_scaled(&b, cb)?;
        for (name, op) in ops {
            let lhs = op(&combo, lambda)?;
            let mut rhs = op(&a, lambda)?;
            rhs.scale(ca);
            rhs.add_scaled(&op(&b, lambda)?, cb)?;
            let rel = lhs.sub(&rhs)?.norm_l2() / rhs.norm_l2().max(1e-30);
            if rel > 1e-10 {
                result
                    .failures
                    .push(format!("linearity: {} lambda {} rel {}", name, lambda, rel));
            }
        }
    }

    // Mean preservation and constant invariance.
    for trial in 0..50 {
        let dims = random_dims(&mut rng, 2);
        let f = random_tensor(&mut rng, dims);
        let lambda = cfg.lambdas[trial % cfg.lambdas.len()];
        let scale = f.norm_l2().max(1.0);
        for (name, g) in [
            ("reweighted_h0", reweighted_h0(&f, lambda)?),
            ("sobolev_h1", sobolev_h1(&f, lambda)?),
            ("sobolev_tilde_h1", sobolev_tilde_h1(&f, lambda)?),
        ] {
            let drift = g.channel_mean().sub(&f.channel_mean())?.norm_l2();
            if drift > 1e-12 * scale {
                result
                    .failures
                    .push(format!("mean: {} lambda {} drift {}", name, lambda, drift));
            }
        }
        let constant = f.channel_mean();
        for (name, g) in [
            ("reweighted_h0", reweighted_h0(&constant, lambda)?),
            ("sobolev_h1", sobolev_h1(&constant, lambda)?),
            ("sobolev_tilde_h1", sobolev_tilde_h1(&constant, lambda)?),
        ] {
            let drift = g.sub(&constant)?.norm_l2();
            if drift > 1e-12 * scale {
                result
                    .failures
                    .push(format!("constant: {} lambda {} drift {}", name, lambda, drift));
            }
        }
    }

    // First-difference energy cannot grow under the Sobolev solves.
    let diff_energy = |t: &Tensor4| {
        let (o, s) = (t.outer(), t.slice_len());
        let mut acc = 0.0;
        for ch in 0..o {
            let next = (ch + 1) % o;
            for j in 0..s {
                let d = t.data()[next * s + j] - t.data()[ch * s + j];
                acc += d * d;
            }
        }
        acc
    };
    for trial in 0..50 {
        let dims = random_dims(&mut rng, 2);
        let f = random_tensor(&mut rng, dims);
        let base = diff_energy(&f);
        let lambda = cfg.lambdas[trial % cfg.lambdas.len()];
        for (name, g) in [
            ("sobolev_h1", sobolev_h1(&f, lambda)?),
            ("sobolev_tilde_h1", sobolev_tilde_h1(&f, lambda)?),
        ] {
            let after = diff_energy(&g);
            if after > base * (1.0 + 1e-12) + 1e-15 {
                result.failures.push(format!(
                    "monotonicity: {} lambda {} energy {} -> {}",
                    name, lambda, base, after
                ));
            }
        }
    }

    Ok(result)
}

#[derive(Debug, Clone)]
pub struct GradCheckTensor {
    pub name: &'static str,
    pub checked: usize,
    pub skipped: usize,
    pub max_err: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub tensors: Vec<GradCheckTensor>,
    pub elapsed: Duration,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.tensors
            .iter()
            .all(|t| t.max_err <= GRADCHECK_RTOL && t.checked > 0)
    }

    pub fn max_err(&self) -> f64 {
        self.tensors.iter().map(|t| t.max_err).fold(0.0, f64::max)
    }
}

fn field_mut(arrays: &mut ModelArrays<f64>, idx: usize) -> &mut Vec<f64> {
    match idx {
        0 => &mut arrays.conv1_w,
        1 => &mut arrays.conv1_b,
        2 => &mut arrays.conv2_w,
        3 => &mut arrays.conv2_b,
        4 => &mut arrays.fc_w,
        _ => &mut arrays.fc_b,
    }
}

fn field_ref(arrays: &ModelArrays<f64>, idx: usize) -> &Vec<f64> {
    match idx {
        0 => &arrays.conv1_w,
        1 => &arrays.conv1_b,
        2 => &arrays.conv2_w,
        3 => &arrays.conv2_b,
        4 => &arrays.fc_w,
        _ => &arrays.fc_b,
    }
}

/// Central-difference check of the CNN backprop, `coords` sampled
/// coordinates per parameter tensor.
///
/// Coordinates whose perturbed evaluations land in different linear regions
/// of the ReLU/max-pool routing are skipped and resampled: finite
/// differences do not estimate the one-sided derivative there.
pub fn gradient_check(seed: u64, coords: usize) -> Result<GradCheckReport> {
    let start = Instant::now();
    let ds = fixture::synthetic_digits(2, seed);
    let batch = Batch::gather(&ds, &[0, 1])?;
    let params = init_params(seed);
    let mut arrays = ModelArrays::<f64>::from_params(&params);

    let mut ws_center = NnWorkspace::<f64>::new();
    forward_into(&arrays, &batch, &mut ws_center);
    let mut grads = ModelArrays::<f64>::zeros();
    backward_into(&arrays, &batch, &mut ws_center, &mut grads);

    let mut ws_plus = NnWorkspace::<f64>::new();
    let mut ws_minus = NnWorkspace::<f64>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9c);
    let h = GRADCHECK_FD_STEP;
    let mut tensors = Vec::new();
    for (idx, name) in PARAM_NAMES.iter().enumerate() {
        let len = field_ref(&arrays, idx).len();
        let mut checked = 0usize;
        let mut skipped = 0usize;
        let mut max_err = 0.0f64;
        let mut attempts = 0usize;
        while checked < coords && attempts < coords * 25 {
            attempts += 1;
            let j = rng.gen_range(0..len);
            let original = field_ref(&arrays, idx)[j];

            field_mut(&mut arrays, idx)[j] = original + h;
            forward_into(&arrays, &batch, &mut ws_plus);
            let loss_plus = loss_from_workspace(&mut ws_plus, batch.labels());

            field_mut(&mut arrays, idx)[j] = original - h;
            forward_into(&arrays, &batch, &mut ws_minus);
            let loss_minus = loss_from_workspace(&mut ws_minus, batch.labels());

            field_mut(&mut arrays, idx)[j] = original;

            if !ws_plus.same_linear_region(&ws_minus)
                || !ws_plus.same_linear_region(&ws_center)
            {
                skipped += 1;
                continue;
            }
            let fd = (loss_plus - loss_minus) / (2.0 * h);
            let an = field_ref(&grads, idx)[j];
            let err = (fd - an).abs() / an.abs().max(fd.abs()).max(GRADCHECK_SCALE_FLOOR);
            max_err = max_err.max(err);
            checked += 1;
        }
        tensors.push(GradCheckTensor {
            name,
            checked,
            skipped,
            max_err,
        });
    }
    Ok(GradCheckReport {
        tensors,
        elapsed: start.elapsed(),
    })
}

// ---------------------------------------------------------------------------
// Runner
// ---------------------------------------------------------------------------

pub fn run_suite(name: &str, cfg: &VerifyConfig) -> Result<SuiteReport> {
    match name {
        "duality" => {
            let r = suite_duality(cfg)?;
            Ok(SuiteReport {
                name: "duality",
                passed: r.passed(),
                detail: format!(
                    "max |ip_m(g,k) - ip_h0(f,k)| / (|f||k|) = {:.3e} over {} trials (tol {:.0e})",
                    r.max_gap, r.trials, DUALITY_TOL
                ),
            })
        }
        "residual" => {
            let r = suite_residual(cfg)?;
            Ok(SuiteReport {
                name: "residual",
                passed: r.passed(),
                detail: format!(
                    "max rel residual: h1 {:.3e}, tilde_h1 {:.3e} (tol {:.0e})",
                    r.max_h1, r.max_tilde, RESIDUAL_TOL
                ),
            })
        }
        "oracle" => {
            let r = suite_oracle(cfg)?;
            Ok(SuiteReport {
                name: "oracle",
                passed: r.passed(),
                detail: format!(
                    "max rel gap vs dense solve: tilde_h1 {:.3e}, h1 {:.3e} in {:.2?} (tol {:.0e})",
                    r.max_rel_tilde, r.max_rel_h1, r.elapsed, ORACLE_TOL
                ),
            })
        }
        "kernel" => {
            let r = suite_kernel(cfg)?;
            let gaps: Vec<String> = r
                .tilde_gaps
                .iter()
                .map(|(o, g)| format!("O={}: {:.4}", o, g))
                .collect();
            Ok(SuiteReport {
                name: "kernel",
                passed: r.passed(),
                detail: format!(
                    "conv-vs-solve gaps [{}]; green's row vs printed K: {:.3}, vs unit-mass form: {:.3e} ({})",
                    gaps.join(", "),
                    r.printed_gap,
                    r.green_gap,
                    if r.matches_green_form() {
                        "matches the unit-mass form"
                    } else {
                        "matches the printed form"
                    }
                ),
            })
        }
        "descent" => {
            let r = suite_descent(cfg)?;
            Ok(SuiteReport {
                name: "descent",
                passed: r.passed(),
                detail: if r.failures.is_empty() {
                    format!(
                        "positivity over {} trials; linearity, mean, constants, monotonicity all hold",
                        r.positivity_trials
                    )
                } else {
                    format!("{} failures, first: {}", r.failures.len(), r.failures[0])
                },
            })
        }
        "gradcheck" => {
            let r = gradient_check(cfg.seed, cfg.gradcheck_coords)?;
            let per: Vec<String> = r
                .tensors
                .iter()
                .map(|t| format!("{}: {:.2e} ({} coords, {} skipped)", t.name, t.max_err, t.checked, t.skipped))
                .collect();
            Ok(SuiteReport {
                name: "gradcheck",
                passed: r.passed(),
                detail: format!("{} in {:.2?} (tol {:.0e})", per.join("; "), r.elapsed, GRADCHECK_RTOL),
            })
        }
        other => Err(Error::invalid(format!(
            "unknown suite '{}' (expected one of {:?})",
            other, SUITE_NAMES
        ))),
    }
}

/// Runs all suites, or only the named one.
pub fn run_suites(filter: Option<&str>, cfg: &VerifyConfig) -> Result<Vec<SuiteReport>> {
    cfg.validate()?;
    match filter {
        Some(name) => Ok(vec![run_suite(name, cfg)?]),
        None => SUITE_NAMES.iter().map(|n| run_suite(n, cfg)).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dense_solver_inverts_a_known_system() {
        // [[2, 1], [1, 3]] x = [3, 5] -> x = [4/5, 7/5].
        let a = vec![vec![2.0, 1.0], vec![1.0, 3.0]];
        let x = dense_solve(a, vec![3.0, 5.0]);
        assert!((x[0] - 0.8).abs() <= 1e-14);
        assert!((x[1] - 1.4).abs() <= 1e-14);
    }

    #[test]
    fn d2_apply_matches_matrix() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let f = random_tensor(&mut rng, [5, 2, 1, 1]);
        let applied = d2_apply(&f);
        let m = d2_matrix(5);
        for r in 0..f.slice_len() {
            for j in 0..5 {
                let mut expect = 0.0;
                for k in 0..5 {
                    expect += m[j][k] * f.data()[k * f.slice_len() + r];
                }
                let got = applied.data()[j * f.slice_len() + r];
                assert!((got - expect).abs() <= 1e-13);
            }
        }
    }

    #[test]
    fn invalid_lambda_is_surfaced_not_a_crash() {
        let cfg = VerifyConfig {
            lambdas: vec![-1.0],
            ..Default::default()
        };
        assert!(matches!(
            run_suites(None, &cfg),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn unknown_suite_is_an_error() {
        assert!(run_suite("no_such_suite", &VerifyConfig::default()).is_err());
    }

    #[test]
    fn duality_suite_passes_quickly() {
        let cfg = VerifyConfig {
            duality_trials: 50,
            ..Default::default()
        };
        let r = suite_duality(&cfg).unwrap();
        assert!(r.passed(), "max gap {}", r.max_gap);
    }

    #[test]
    fn residual_suite_passes() {
        let r = suite_residual(&VerifyConfig::default()).unwrap();
        assert!(r.passed(), "h1 {} tilde {}", r.max_h1, r.max_tilde);
    }
}
