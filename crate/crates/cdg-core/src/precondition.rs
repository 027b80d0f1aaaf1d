//! Channel-directed gradient preconditioners.
//!
//! Every operator here maps a raw flat-metric gradient tensor `f` to the
//! gradient of the same loss under a different metric, acting independently
//! on each fiber along the output-channel axis:
//!
//! * [`reweighted_h0`]: `g = f_bar + (1/lambda) * (f - f_bar)` — re-weights
//!   the channel-mean ("translation") and residual ("deformation") parts.
//! * [`reweighted_h0_code_variant`]: `g = f + lambda * f_bar` — the additive
//!   form; equals `(1+lambda) * reweighted_h0(f, 1+lambda)`, i.e. the same
//!   family up to a global scale and a reparameterization of `lambda`.
//! * [`sobolev_h1`]: exact solution of `(I - lambda*O^2*D2) g = f` with the
//!   periodic second difference `D2` along axis 0.
//! * [`sobolev_tilde_h1`]: exact solution of `f_bar - lambda*O^2*D2 g = f`
//!   with `channel_mean(g) = f_bar`, computed in O(O) per fiber by two
//!   cumulative-sum passes (discrete double integration with periodic and
//!   zero-mean corrections).
//! * [`laplacian_rasterized`]: baseline that flattens the tensor to one long
//!   vector and solves `(I - sigma*D2) g = f` on it, ignoring tensor
//!   structure.
//!
//! The circulant systems are solved directly (rank-one-corrected tridiagonal
//! elimination), so the cost is linear in the channel count with no
//! transform step. All operators are linear, positive definite, and — apart
//! from the code variant — preserve the channel mean.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor4;

/// Which metric induces the gradient map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Identity,
    ReweightedH0,
    ReweightedH0CodeVariant,
    SobolevH1,
    SobolevTildeH1,
    LaplacianRasterized,
}

impl Metric {
    pub const ALL: [Metric; 6] = [
        Metric::Identity,
        Metric::ReweightedH0,
        Metric::ReweightedH0CodeVariant,
        Metric::SobolevH1,
        Metric::SobolevTildeH1,
        Metric::LaplacianRasterized,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Metric::Identity => "identity",
            Metric::ReweightedH0 => "reweighted_h0",
            Metric::ReweightedH0CodeVariant => "reweighted_h0_code_variant",
            Metric::SobolevH1 => "sobolev_h1",
            Metric::SobolevTildeH1 => "sobolev_tilde_h1",
            Metric::LaplacianRasterized => "laplacian_rasterized",
        }
    }
}

impl std::fmt::Display for Metric {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "identity" => Ok(Metric::Identity),
            "reweighted_h0" => Ok(Metric::ReweightedH0),
            "reweighted_h0_code_variant" => Ok(Metric::ReweightedH0CodeVariant),
            "sobolev_h1" => Ok(Metric::SobolevH1),
            "sobolev_tilde_h1" => Ok(Metric::SobolevTildeH1),
            "laplacian_rasterized" => Ok(Metric::LaplacianRasterized),
            other => Err(Error::invalid(format!("unknown metric '{}'", other))),
        }
    }
}

/// Tensor axis the smoothing acts along.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    Output,
    Input,
}

impl Axis {
    pub fn name(&self) -> &'static str {
        match self {
            Axis::Output => "output",
            Axis::Input => "input",
        }
    }
}

impl std::fmt::Display for Axis {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Axis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "output" => Ok(Axis::Output),
            "input" => Ok(Axis::Input),
            other => Err(Error::invalid(format!("unknown axis '{}'", other))),
        }
    }
}

/// Full description of one preconditioning step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrecondConfig {
    pub metric: Metric,
    /// Smoothness weight of the metric (must be positive).
    pub lambda: f64,
    /// Scale of the raw gradient blended back into the Sobolev gradients to
    /// avoid over-smoothing; ignored by the other metrics.
    pub blend_beta: f64,
    /// Axis the channel-directed operators smooth along.
    pub axis: Axis,
    /// Flatten to a single vector before smoothing (the "all parameters
    /// rasterized" ablation); overrides `axis`.
    pub rasterize: bool,
    /// Smoothing weight of the rasterized-Laplacian baseline.
    pub sigma: f64,
}

impl Default for PrecondConfig {
    fn default() -> Self {
        PrecondConfig {
            metric: Metric::Identity,
            lambda: 1.0,
            blend_beta: 1.0,
            axis: Axis::Output,
            rasterize: false,
            sigma: 1.0,
        }
    }
}

impl PrecondConfig {
    pub fn with_metric(metric: Metric) -> Self {
        PrecondConfig {
            metric,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0) || !self.lambda.is_finite() {
            return Err(Error::invalid(format!(
                "lambda must be > 0, got {}",
                self.lambda
            )));
        }
        if !(self.blend_beta >= 0.0) || !self.blend_beta.is_finite() {
            return Err(Error::invalid(format!(
                "blend beta must be >= 0, got {}",
                self.blend_beta
            )));
        }
        if !(self.sigma > 0.0) || !self.sigma.is_finite() {
            return Err(Error::invalid(format!(
                "sigma must be > 0, got {}",
                self.sigma
            )));
        }
        Ok(())
    }

    /// Upper bound on the spectral norm of the preconditioner this config
    /// selects (blend included). Used to scale step sizes so that gradient
    /// descent on a quadratic stays contractive.
    ///
    /// The Sobolev solves have norm at most `max(1, 1/(16*lambda))`: the
    /// mean mode passes through unscaled and the smallest positive
    /// difference eigenvalue of `lambda*O^2*D2` is
    /// `2*lambda*O^2*(1 - cos(2*pi/O)) >= 16*lambda` over integer `O >= 2`.
    pub fn operator_norm_bound(&self) -> f64 {
        match self.metric {
            Metric::Identity => 1.0,
            Metric::ReweightedH0 => (1.0 / self.lambda).max(1.0),
            Metric::ReweightedH0CodeVariant => 1.0 + self.lambda,
            Metric::SobolevH1 => 1.0 + self.blend_beta,
            Metric::SobolevTildeH1 => (1.0 / (16.0 * self.lambda)).max(1.0) + self.blend_beta,
            Metric::LaplacianRasterized => 1.0,
        }
    }
}

fn check_lambda(lambda: f64) -> Result<()> {
    if !(lambda > 0.0) || !lambda.is_finite() {
        return Err(Error::invalid(format!("lambda must be > 0, got {}", lambda)));
    }
    Ok(())
}

/// Re-weighted flat gradient: `g = f_bar + (1/lambda) * (f - f_bar)`,
/// evaluated as `f + (1/lambda - 1) * (f - f_bar)` so that `lambda = 1` is
/// an exact no-op.
pub fn reweighted_h0(f: &Tensor4, lambda: f64) -> Result<Tensor4> {
    check_lambda(lambda)?;
    let mean = f.channel_mean();
    let coeff = 1.0 / lambda - 1.0;
    let mut g = f.clone();
    for ((g, &fv), &m) in g.data_mut().iter_mut().zip(f.data()).zip(mean.data()) {
        *g += coeff * (fv - m);
    }
    Ok(g)
}

/// The additive form `g = f + lambda * f_bar` of the re-weighted gradient.
pub fn reweighted_h0_code_variant(f: &Tensor4, lambda: f64) -> Result<Tensor4> {
    check_lambda(lambda)?;
    let mean = f.channel_mean();
    let mut g = f.clone();
    g.add_scaled(&mean, lambda)?;
    Ok(g)
}

/// Sobolev gradient: exact solution of `(I - lambda*O^2*D2) g = f` per
/// fiber, `D2` the periodic second difference along axis 0. Identity when
/// the axis has a single channel.
pub fn sobolev_h1(f: &Tensor4, lambda: f64) -> Result<Tensor4> {
    check_lambda(lambda)?;
    let o = f.outer();
    if o < 2 {
        return Ok(f.clone());
    }
    let c = lambda * (o * o) as f64;
    let s = f.slice_len();
    let mut g = f.clone();
    solve_identity_minus_c_d2(g.data_mut(), o, s, c);
    // One pass of iterative refinement keeps the residual near machine
    // precision even when c is large and the system is badly scaled.
    let mut resid = vec![0.0; o * s];
    apply_identity_minus_c_d2(g.data(), o, s, c, &mut resid);
    for (r, &fv) in resid.iter_mut().zip(f.data()) {
        *r = fv - *r;
    }
    solve_identity_minus_c_d2(&mut resid, o, s, c);
    for (gv, r) in g.data_mut().iter_mut().zip(&resid) {
        *gv += r;
    }
    Ok(g)
}

/// Averaged Sobolev gradient: exact solution of
/// `f_bar - lambda*O^2*D2 g = f` with `channel_mean(g) = f_bar`, in O(O)
/// per fiber via two cumulative sums. Identity on a single channel.
pub fn sobolev_tilde_h1(f: &Tensor4, lambda: f64) -> Result<Tensor4> {
    check_lambda(lambda)?;
    let o = f.outer();
    if o < 2 {
        return Ok(f.clone());
    }
    let s = f.slice_len();
    let inv_c = 1.0 / (lambda * (o * o) as f64);
    let inv_o = 1.0 / o as f64;

    // fbar[r] = mean over the channel axis.
    let mut fbar = vec![0.0; s];
    for row in f.data().chunks_exact(s) {
        for (m, &v) in fbar.iter_mut().zip(row) {
            *m += v;
        }
    }
    for m in &mut fbar {
        *m *= inv_o;
    }

    // D2 g = (fbar - f)/c fiber-wise; integrate twice with the free
    // constants pinned by periodicity (first differences sum to zero) and
    // the mean constraint (channel_mean(g) = fbar).
    let mut work = f.clone();
    let buf = work.data_mut();
    for row in buf.chunks_exact_mut(s) {
        for (v, &m) in row.iter_mut().zip(&fbar) {
            *v = (m - *v) * inv_c;
        }
    }
    // First cumulative sum: buf[ch] = C[ch] = sum_{m<=ch} s[m].
    for ch in 1..o {
        let (prev, cur) = buf[(ch - 1) * s..(ch + 1) * s].split_at_mut(s);
        for (c, &p) in cur.iter_mut().zip(prev.iter()) {
            *c += p;
        }
    }
    // Subtract the column mean of C so the first differences close the loop.
    let mut cmean = vec![0.0; s];
    for row in buf.chunks_exact(s) {
        for (m, &v) in cmean.iter_mut().zip(row) {
            *m += v;
        }
    }
    for m in &mut cmean {
        *m *= inv_o;
    }
    for row in buf.chunks_exact_mut(s) {
        for (v, &m) in row.iter_mut().zip(&cmean) {
            *v -= m;
        }
    }
    // Second (exclusive) cumulative sum: buf[ch] = P[ch] = sum_{m<ch} d[m].
    let mut running = vec![0.0; s];
    let mut tmp = vec![0.0; s];
    for row in buf.chunks_exact_mut(s) {
        tmp.copy_from_slice(row);
        row.copy_from_slice(&running);
        for (acc, &t) in running.iter_mut().zip(&tmp) {
            *acc += t;
        }
    }
    // Pin the fiber mean: g = fbar - mean(P) + P.
    let mut pmean = vec![0.0; s];
    for row in buf.chunks_exact(s) {
        for (m, &v) in pmean.iter_mut().zip(row) {
            *m += v;
        }
    }
    for (m, &fb) in pmean.iter_mut().zip(&fbar) {
        *m = fb - *m * inv_o;
    }
    for row in buf.chunks_exact_mut(s) {
        for (v, &m) in row.iter_mut().zip(&pmean) {
            *v += m;
        }
    }
    Ok(work)
}

/// Rasterized inverse-Laplacian smoothing baseline: flatten, solve
/// `(I - sigma*D2) g = f` on the single long vector, restore the shape.
pub fn laplacian_rasterized(f: &Tensor4, sigma: f64) -> Result<Tensor4> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::invalid(format!("sigma must be > 0, got {}", sigma)));
    }
    let n = f.len();
    if n < 2 {
        return Ok(f.clone());
    }
    let mut flat = f.rasterize();
    solve_identity_minus_c_d2(flat.data_mut(), n, 1, sigma);
    let mut resid = vec![0.0; n];
    apply_identity_minus_c_d2(flat.data(), n, 1, sigma, &mut resid);
    for (r, &fv) in resid.iter_mut().zip(f.data()) {
        *r = fv - *r;
    }
    solve_identity_minus_c_d2(&mut resid, n, 1, sigma);
    for (gv, r) in flat.data_mut().iter_mut().zip(&resid) {
        *gv += r;
    }
    flat.derasterize(f.dims())
}

/// The printed closed-form kernel of the plain Sobolev gradient, for
/// `o` in `[0, 1]` (channel offset rescaled by `O`).
pub fn kernel_k(o: f64, lambda: f64) -> Result<f64> {
    check_kernel_args(o, lambda)?;
    let t = lambda.powf(-0.5);
    Ok((t * (o - 0.5)).cosh() / (2.0 * t.sinh()))
}

/// Unit-mass periodic Green's function of `(I - lambda * d^2/do^2)` on the
/// unit circle; the normalization the discrete solve converges to.
pub fn kernel_k_green(o: f64, lambda: f64) -> Result<f64> {
    check_kernel_args(o, lambda)?;
    let rl = lambda.sqrt();
    Ok(((o - 0.5) / rl).cosh() / (2.0 * rl * (0.5 / rl).sinh()))
}

/// Closed-form kernel of the averaged Sobolev gradient:
/// `1 + (o^2 - o + 1/6) / (2*lambda)` for `o` in `[0, 1]`.
pub fn kernel_ktilde(o: f64, lambda: f64) -> Result<f64> {
    check_kernel_args(o, lambda)?;
    Ok(1.0 + (o * o - o + 1.0 / 6.0) / (2.0 * lambda))
}

fn check_kernel_args(o: f64, lambda: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&o) {
        return Err(Error::invalid(format!("kernel offset {} outside [0, 1]", o)));
    }
    check_lambda(lambda)
}

/// Dense circular convolution along axis 0 with weight `1/O` per sample:
/// `g[o] = (1/O) * sum_d kernel[d] * f[(o - d) mod O]` fiber-wise.
///
/// Quadratic in the channel count; used as a verification oracle for the
/// linear-time solvers, never in training.
pub fn conv_oracle(f: &Tensor4, kernel: &[f64]) -> Result<Tensor4> {
    let o = f.outer();
    if kernel.len() != o {
        return Err(Error::invalid(format!(
            "kernel length {} does not match channel count {}",
            kernel.len(),
            o
        )));
    }
    let s = f.slice_len();
    let inv_o = 1.0 / o as f64;
    let mut g = Tensor4::zeros(f.dims())?;
    let src = f.data();
    let dst = g.data_mut();
    for ch in 0..o {
        let out = &mut dst[ch * s..(ch + 1) * s];
        for (d, &k) in kernel.iter().enumerate() {
            let from = (ch + o - d % o) % o;
            let row = &src[from * s..(from + 1) * s];
            let w = k * inv_o;
            for (ov, &rv) in out.iter_mut().zip(row) {
                *ov += w * rv;
            }
        }
    }
    Ok(g)
}

/// Applies the configured preconditioner: optional rasterization or axis
/// transpose, the metric's gradient operator, and for the Sobolev metrics a
/// `blend_beta`-scaled copy of the raw gradient added back.
pub fn precondition(f: &Tensor4, cfg: &PrecondConfig) -> Result<Tensor4> {
    cfg.validate()?;
    let metric = cfg.metric;
    match metric {
        Metric::Identity => Ok(f.clone()),
        Metric::LaplacianRasterized => laplacian_rasterized(f, cfg.sigma),
        _ => {
            let mut g = if cfg.rasterize {
                let flat = f.rasterize();
                apply_along_axis0(&flat, metric, cfg.lambda)?.derasterize(f.dims())?
            } else if cfg.axis == Axis::Input {
                let t = f.transpose_axes([1, 0, 2, 3])?;
                apply_along_axis0(&t, metric, cfg.lambda)?.transpose_axes([1, 0, 2, 3])?
            } else {
                apply_along_axis0(f, metric, cfg.lambda)?
            };
            if matches!(metric, Metric::SobolevH1 | Metric::SobolevTildeH1) {
                g.add_scaled(f, cfg.blend_beta)?;
            }
            Ok(g)
        }
    }
}

fn apply_along_axis0(f: &Tensor4, metric: Metric, lambda: f64) -> Result<Tensor4> {
    match metric {
        Metric::ReweightedH0 => reweighted_h0(f, lambda),
        Metric::ReweightedH0CodeVariant => reweighted_h0_code_variant(f, lambda),
        Metric::SobolevH1 => sobolev_h1(f, lambda),
        Metric::SobolevTildeH1 => sobolev_tilde_h1(f, lambda),
        Metric::Identity | Metric::LaplacianRasterized => unreachable!("dispatched earlier"),
    }
}

/// `out = (I - c*D2) g` on an `(n x s)` slab, `D2` periodic along the rows.
pub(crate) fn apply_identity_minus_c_d2(g: &[f64], n: usize, s: usize, c: f64, out: &mut [f64]) {
    debug_assert_eq!(g.len(), n * s);
    debug_assert_eq!(out.len(), n * s);
    let b = 1.0 + 2.0 * c;
    for row in 0..n {
        let prev = (row + n - 1) % n;
        let next = (row + 1) % n;
        let cur = &g[row * s..(row + 1) * s];
        let up = &g[prev * s..(prev + 1) * s];
        let dn = &g[next * s..(next + 1) * s];
        let dst = &mut out[row * s..(row + 1) * s];
        for j in 0..s {
            dst[j] = b * cur[j] - c * (up[j] + dn[j]);
        }
    }
}

/// Solves `(I - c*D2) x = rhs` in place on an `(n x s)` slab.
///
/// The matrix is symmetric positive definite and circulant tridiagonal
/// (diagonal `1+2c`, neighbors `-c`, wrap-around corners `-c`). The solve is
/// a tridiagonal elimination plus a rank-one Sherman-Morrison correction for
/// the corners, both O(n) per fiber, with the factorization shared across
/// all `s` fibers of the slab.
pub(crate) fn solve_identity_minus_c_d2(rhs: &mut [f64], n: usize, s: usize, c: f64) {
    debug_assert_eq!(rhs.len(), n * s);
    if n == 1 || c == 0.0 {
        return;
    }
    let b = 1.0 + 2.0 * c;
    if n == 2 {
        // Both neighbors of each row alias the other row: dense 2x2 solve.
        let det = 1.0 + 4.0 * c;
        let (d00, d01) = (b / det, 2.0 * c / det);
        let (top, bot) = rhs.split_at_mut(s);
        for (t, bo) in top.iter_mut().zip(bot.iter_mut()) {
            let (f0, f1) = (*t, *bo);
            *t = d00 * f0 + d01 * f1;
            *bo = d01 * f0 + d00 * f1;
        }
        return;
    }

    // Sherman-Morrison setup: gamma = -b, u = [gamma, 0, .., alpha],
    // v = [1, 0, .., beta/gamma] with alpha = beta = -c.
    let gamma = -b;
    let beta_over_gamma = c / b; // (-c) / (-b)
    let mut diag = vec![b; n];
    diag[0] = b - gamma;
    diag[n - 1] = b + c * c / b; // b - alpha*beta/gamma

    // Shared Thomas factorization of the modified tridiagonal matrix.
    let mut gam = vec![0.0; n];
    let mut inv_bet = vec![0.0; n];
    let mut bet = diag[0];
    inv_bet[0] = 1.0 / bet;
    for j in 1..n {
        gam[j] = -c * inv_bet[j - 1];
        bet = diag[j] + c * gam[j]; // diag - sub*gam, sub = -c
        inv_bet[j] = 1.0 / bet;
    }

    // z = T^{-1} u, needed once per factorization.
    let mut z = vec![0.0; n];
    z[0] = gamma;
    z[n - 1] = -c;
    thomas_sweep_vec(&mut z, &gam, &inv_bet, c);

    let denom = 1.0 + z[0] + beta_over_gamma * z[n - 1];
    let inv_denom = 1.0 / denom;

    // Forward substitution over the slab.
    for j in 0..n {
        if j == 0 {
            let ib = inv_bet[0];
            for v in &mut rhs[..s] {
                *v *= ib;
            }
        } else {
            let ib = inv_bet[j];
            let (prev, cur) = rhs[(j - 1) * s..(j + 1) * s].split_at_mut(s);
            for (v, &p) in cur.iter_mut().zip(prev.iter()) {
                *v = (*v + c * p) * ib; // rhs - sub*prev, sub = -c
            }
        }
    }
    // Back substitution.
    for j in (0..n - 1).rev() {
        let g = gam[j + 1];
        let (cur, next) = rhs[j * s..(j + 2) * s].split_at_mut(s);
        for (v, &nx) in cur.iter_mut().zip(next.iter()) {
            *v -= g * nx;
        }
    }
    // Rank-one correction, one factor per fiber.
    for j in 0..s {
        let fac = (rhs[j] + beta_over_gamma * rhs[(n - 1) * s + j]) * inv_denom;
        if fac != 0.0 {
            for (row, &zv) in z.iter().enumerate() {
                rhs[row * s + j] -= fac * zv;
            }
        }
    }
}

fn thomas_sweep_vec(x: &mut [f64], gam: &[f64], inv_bet: &[f64], c: f64) {
    let n = x.len();
    x[0] *= inv_bet[0];
    for j in 1..n {
        x[j] = (x[j] + c * x[j - 1]) * inv_bet[j];
    }
    for j in (0..n - 1).rev() {
        x[j] -= gam[j + 1] * x[j + 1];
    }
}
