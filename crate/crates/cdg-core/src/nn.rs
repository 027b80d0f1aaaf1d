//! Desk-scale two-layer CNN with hand-derived backprop.
//!
//! Architecture: 5x5 valid convolution (50 filters) -> ReLU -> 2x2 max-pool
//! -> 5x5 valid convolution (100 filters) -> ReLU -> 2x2 max-pool -> dense
//! -> 10 logits, trained with mean softmax cross-entropy.
//!
//! The master parameters are 64-bit [`Tensor4`]s. The compute kernels are
//! generic over [`Real`] so the training loop can run the model in f32
//! while the preconditioners and optimizer stay in f64; gradient checks run
//! the same kernels in f64. Convolutions are evaluated as im2col plus a
//! blocked `A * B^T` product built on `mul_add`.

use num_traits::Float;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::tensor::Tensor4;

/// Scalar type of the model compute path.
pub trait Real: Float + Default + std::fmt::Debug + Send + Sync + 'static {
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Real for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
}

pub const IN_SIDE: usize = 28;
pub const IN_PIXELS: usize = IN_SIDE * IN_SIDE;
pub const KERNEL: usize = 5;
pub const CONV1_OUT: usize = 50;
pub const CONV2_OUT: usize = 100;
pub const NUM_CLASSES: usize = 10;

pub const C1_SIDE: usize = IN_SIDE - KERNEL + 1; // 24
pub const P1_SIDE: usize = C1_SIDE / 2; // 12
pub const C2_SIDE: usize = P1_SIDE - KERNEL + 1; // 8
pub const P2_SIDE: usize = C2_SIDE / 2; // 4
pub const FC_IN: usize = CONV2_OUT * P2_SIDE * P2_SIDE; // 1600

const K1: usize = KERNEL * KERNEL; // 25
/// `K1` padded to a full lane multiple; the pad columns stay zero.
const K1P: usize = 32;
const P1: usize = C1_SIDE * C1_SIDE; // 576
const K2: usize = CONV1_OUT * KERNEL * KERNEL; // 1250
const P2: usize = C2_SIDE * C2_SIDE; // 64

/// The network's parameter set. Weights carry their output-channel axis as
/// axis 0; biases are stored as `(O, 1, 1, 1)` tensors so the optimizer
/// treats every parameter uniformly.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub conv1_w: Tensor4,
    pub conv1_b: Tensor4,
    pub conv2_w: Tensor4,
    pub conv2_b: Tensor4,
    pub fc_w: Tensor4,
    pub fc_b: Tensor4,
}

pub const PARAM_NAMES: [&str; 6] = [
    "conv1_w", "conv1_b", "conv2_w", "conv2_b", "fc_w", "fc_b",
];

impl ModelParams {
    pub fn zeros() -> Self {
        ModelParams {
            conv1_w: Tensor4::zeros([CONV1_OUT, 1, KERNEL, KERNEL]).unwrap(),
            conv1_b: Tensor4::zeros([CONV1_OUT, 1, 1, 1]).unwrap(),
            conv2_w: Tensor4::zeros([CONV2_OUT, CONV1_OUT, KERNEL, KERNEL]).unwrap(),
            conv2_b: Tensor4::zeros([CONV2_OUT, 1, 1, 1]).unwrap(),
            fc_w: Tensor4::zeros([NUM_CLASSES, FC_IN, 1, 1]).unwrap(),
            fc_b: Tensor4::zeros([NUM_CLASSES, 1, 1, 1]).unwrap(),
        }
    }

    pub fn field(&self, name: &str) -> Option<&Tensor4> {
        match name {
            "conv1_w" => Some(&self.conv1_w),
            "conv1_b" => Some(&self.conv1_b),
            "conv2_w" => Some(&self.conv2_w),
            "conv2_b" => Some(&self.conv2_b),
            "fc_w" => Some(&self.fc_w),
            "fc_b" => Some(&self.fc_b),
            _ => None,
        }
    }

    pub fn all_finite(&self) -> bool {
        self.conv1_w.all_finite()
            && self.conv1_b.all_finite()
            && self.conv2_w.all_finite()
            && self.conv2_b.all_finite()
            && self.fc_w.all_finite()
            && self.fc_b.all_finite()
    }
}

/// Uniform fan-in scaled initialization: weights drawn from
/// `U(-sqrt(3/fan_in), sqrt(3/fan_in))` (empirical std `1/sqrt(fan_in)`),
/// biases zero. Fully determined by the seed.
pub fn init_params(seed: u64) -> ModelParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ModelParams::zeros();
    let mut fill = |t: &mut Tensor4, fan_in: usize| {
        let bound = (3.0 / fan_in as f64).sqrt();
        for v in t.data_mut() {
            *v = rng.gen_range(-bound..=bound);
        }
    };
    fill(&mut params.conv1_w, K1);
    fill(&mut params.conv2_w, K2);
    fill(&mut params.fc_w, FC_IN);
    params
}

/// Flat working copy of the parameters in the compute precision.
#[derive(Debug, Clone)]
pub struct ModelArrays<T> {
    pub conv1_w: Vec<T>,
    pub conv1_b: Vec<T>,
    pub conv2_w: Vec<T>,
    pub conv2_b: Vec<T>,
    pub fc_w: Vec<T>,
    pub fc_b: Vec<T>,
}

impl<T: Real> ModelArrays<T> {
    pub fn zeros() -> Self {
        ModelArrays {
            conv1_w: vec![T::zero(); CONV1_OUT * K1],
            conv1_b: vec![T::zero(); CONV1_OUT],
            conv2_w: vec![T::zero(); CONV2_OUT * K2],
            conv2_b: vec![T::zero(); CONV2_OUT],
            fc_w: vec![T::zero(); NUM_CLASSES * FC_IN],
            fc_b: vec![T::zero(); NUM_CLASSES],
        }
    }

    pub fn from_params(p: &ModelParams) -> Self {
        fn cast<T: Real>(t: &Tensor4) -> Vec<T> {
            t.data().iter().map(|&v| T::from_f64(v)).collect()
        }
        ModelArrays {
            conv1_w: cast(&p.conv1_w),
            conv1_b: cast(&p.conv1_b),
            conv2_w: cast(&p.conv2_w),
            conv2_b: cast(&p.conv2_b),
            fc_w: cast(&p.fc_w),
            fc_b: cast(&p.fc_b),
        }
    }

    /// Refreshes the working copy from the 64-bit master parameters.
    pub fn refresh(&mut self, p: &ModelParams) {
        fn fill<T: Real>(dst: &mut [T], t: &Tensor4) {
            for (d, &v) in dst.iter_mut().zip(t.data()) {
                *d = T::from_f64(v);
            }
        }
        fill(&mut self.conv1_w, &p.conv1_w);
        fill(&mut self.conv1_b, &p.conv1_b);
        fill(&mut self.conv2_w, &p.conv2_w);
        fill(&mut self.conv2_b, &p.conv2_b);
        fill(&mut self.fc_w, &p.fc_w);
        fill(&mut self.fc_b, &p.fc_b);
    }

    /// Packages gradient arrays into a `ModelParams`-shaped container.
    pub fn to_params(&self) -> ModelParams {
        fn pack<T: Real>(data: &[T], dims: [usize; 4]) -> Tensor4 {
            Tensor4::new(dims, data.iter().map(|&v| v.to_f64()).collect()).unwrap()
        }
        ModelParams {
            conv1_w: pack(&self.conv1_w, [CONV1_OUT, 1, KERNEL, KERNEL]),
            conv1_b: pack(&self.conv1_b, [CONV1_OUT, 1, 1, 1]),
            conv2_w: pack(&self.conv2_w, [CONV2_OUT, CONV1_OUT, KERNEL, KERNEL]),
            conv2_b: pack(&self.conv2_b, [CONV2_OUT, 1, 1, 1]),
            fc_w: pack(&self.fc_w, [NUM_CLASSES, FC_IN, 1, 1]),
            fc_b: pack(&self.fc_b, [NUM_CLASSES, 1, 1, 1]),
        }
    }

    pub fn zero_out(&mut self) {
        for buf in [
            &mut self.conv1_w,
            &mut self.conv1_b,
            &mut self.conv2_w,
            &mut self.conv2_b,
            &mut self.fc_w,
            &mut self.fc_b,
        ] {
            buf.iter_mut().for_each(|v| *v = T::zero());
        }
    }
}

/// A mini-batch: images as `(B, 1, 28, 28)` values in `[0, 1]` plus labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    images: Vec<f64>,
    labels: Vec<u8>,
}

impl Batch {
    pub fn new(images: Vec<f64>, labels: Vec<u8>) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::invalid("batch must contain at least one sample"));
        }
        if images.len() != labels.len() * IN_PIXELS {
            return Err(Error::invalid(format!(
                "batch has {} pixels for {} labels",
                images.len(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= NUM_CLASSES) {
            return Err(Error::invalid(format!("label {} outside 0..=9", bad)));
        }
        if images.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::invalid("image values outside [0, 1]"));
        }
        Ok(Batch { images, labels })
    }

    pub fn gather(ds: &Dataset, indices: &[usize]) -> Result<Self> {
        let mut images = Vec::with_capacity(indices.len() * IN_PIXELS);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            images.extend_from_slice(ds.image(i));
            labels.push(ds.label(i));
        }
        Batch::new(images, labels)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn image(&self, idx: usize) -> &[f64] {
        &self.images[idx * IN_PIXELS..(idx + 1) * IN_PIXELS]
    }
}

/// Cached activations of one forward pass, reusable across batches.
#[derive(Debug, Clone)]
pub struct NnWorkspace<T> {
    batch: usize,
    /// Pre-activation conv outputs, per image: `(B, 50, 24, 24)`.
    pub conv1_pre: Vec<T>,
    /// ReLU'd and pooled: `(B, 50, 12, 12)`.
    pub pool1: Vec<T>,
    /// Winning offset inside each 24x24 plane.
    pub pool1_idx: Vec<u32>,
    /// `(B, 100, 8, 8)`.
    pub conv2_pre: Vec<T>,
    /// `(B, 100, 4, 4)`; doubles as the dense layer input.
    pub pool2: Vec<T>,
    pub pool2_idx: Vec<u32>,
    /// `(B, 10)`.
    pub logits: Vec<T>,
    // Per-image scratch.
    im2col1: Vec<T>,
    im2col2: Vec<T>,
    w1_pad: Vec<T>,
    relu_plane: Vec<T>,
    dcol: Vec<T>,
    dplane1: Vec<T>,
    dplane2: Vec<T>,
    dpool1: Vec<T>,
    dlogits: Vec<T>,
}

impl<T: Real> NnWorkspace<T> {
    pub fn new() -> Self {
        NnWorkspace {
            batch: 0,
            conv1_pre: Vec::new(),
            pool1: Vec::new(),
            pool1_idx: Vec::new(),
            conv2_pre: Vec::new(),
            pool2: Vec::new(),
            pool2_idx: Vec::new(),
            logits: Vec::new(),
            im2col1: vec![T::zero(); P1 * K1P],
            im2col2: vec![T::zero(); P2 * K2],
            w1_pad: vec![T::zero(); CONV1_OUT * K1P],
            relu_plane: vec![T::zero(); CONV1_OUT.max(CONV2_OUT) * P1],
            dcol: vec![T::zero(); P2 * K2],
            dplane1: vec![T::zero(); CONV1_OUT * P1],
            dplane2: vec![T::zero(); CONV2_OUT * P2],
            dpool1: vec![T::zero(); CONV1_OUT * P1_SIDE * P1_SIDE],
            dlogits: Vec::new(),
        }
    }

    fn ensure(&mut self, batch: usize) {
        if self.batch == batch {
            return;
        }
        self.batch = batch;
        self.conv1_pre.resize(batch * CONV1_OUT * P1, T::zero());
        self.pool1
            .resize(batch * CONV1_OUT * P1_SIDE * P1_SIDE, T::zero());
        self.pool1_idx.resize(batch * CONV1_OUT * P1_SIDE * P1_SIDE, 0);
        self.conv2_pre.resize(batch * CONV2_OUT * P2, T::zero());
        self.pool2.resize(batch * FC_IN, T::zero());
        self.pool2_idx.resize(batch * CONV2_OUT * P2_SIDE * P2_SIDE, 0);
        self.logits.resize(batch * NUM_CLASSES, T::zero());
        self.dlogits.resize(batch * NUM_CLASSES, T::zero());
    }

    pub fn batch_len(&self) -> usize {
        self.batch
    }

    /// Logits of one sample.
    pub fn sample_logits(&self, idx: usize) -> &[T] {
        &self.logits[idx * NUM_CLASSES..(idx + 1) * NUM_CLASSES]
    }

    /// True when the piecewise-linear routing of the loss matches `other`'s:
    /// every pool window picks the same winner and the winning
    /// pre-activation keeps its ReLU sign. Sign flips of non-winning window
    /// elements cannot reach the loss, so they are ignored. Central
    /// differences are only trusted when both perturbed evaluations stay in
    /// the same region.
    pub fn same_linear_region(&self, other: &Self) -> bool {
        if self.pool1_idx != other.pool1_idx || self.pool2_idx != other.pool2_idx {
            return false;
        }
        winners_keep_sign(
            &self.conv1_pre,
            &other.conv1_pre,
            &self.pool1_idx,
            CONV1_OUT,
            C1_SIDE,
            self.batch,
        ) && winners_keep_sign(
            &self.conv2_pre,
            &other.conv2_pre,
            &self.pool2_idx,
            CONV2_OUT,
            C2_SIDE,
            self.batch,
        )
    }
}

impl<T: Real> Default for NnWorkspace<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn winners_keep_sign<T: Real>(
    pre_a: &[T],
    pre_b: &[T],
    idx: &[u32],
    channels: usize,
    side: usize,
    batch: usize,
) -> bool {
    let plane = side * side;
    let windows = (side / 2) * (side / 2);
    for img in 0..batch {
        for c in 0..channels {
            let base = (img * channels + c) * plane;
            let win_base = (img * channels + c) * windows;
            for q in 0..windows {
                let at = base + idx[win_base + q] as usize;
                if (pre_a[at] > T::zero()) != (pre_b[at] > T::zero()) {
                    return false;
                }
            }
        }
    }
    true
}

// ---------------------------------------------------------------------------
// Kernels
// ---------------------------------------------------------------------------

// Plain multiply-accumulate over fixed-width lane blocks: the separate
// mul/add keep strict FP semantics while letting the vectorizer pack the
// independent lanes.
const LANES: usize = 16;

fn sum_lanes<T: Real>(acc: [T; LANES]) -> T {
    let mut s = T::zero();
    for v in acc {
        s = s + v;
    }
    s
}

#[inline(always)]
fn chunk<T: Real>(s: &[T], c: usize) -> &[T; LANES] {
    s[c * LANES..(c + 1) * LANES].try_into().unwrap()
}

/// Four simultaneous dot products of `w` against rows `m0..m3`.
fn dot4<T: Real>(w: &[T], m0: &[T], m1: &[T], m2: &[T], m3: &[T]) -> [T; 4] {
    let n = w.len();
    let chunks = n / LANES;
    let mut a0 = [T::zero(); LANES];
    let mut a1 = [T::zero(); LANES];
    let mut a2 = [T::zero(); LANES];
    let mut a3 = [T::zero(); LANES];
    for c in 0..chunks {
        let cw = chunk(w, c);
        let c0 = chunk(m0, c);
        let c1 = chunk(m1, c);
        let c2 = chunk(m2, c);
        let c3 = chunk(m3, c);
        for l in 0..LANES {
            a0[l] = a0[l] + cw[l] * c0[l];
            a1[l] = a1[l] + cw[l] * c1[l];
            a2[l] = a2[l] + cw[l] * c2[l];
            a3[l] = a3[l] + cw[l] * c3[l];
        }
    }
    let mut out = [sum_lanes(a0), sum_lanes(a1), sum_lanes(a2), sum_lanes(a3)];
    for j in chunks * LANES..n {
        out[0] = out[0] + w[j] * m0[j];
        out[1] = out[1] + w[j] * m1[j];
        out[2] = out[2] + w[j] * m2[j];
        out[3] = out[3] + w[j] * m3[j];
    }
    out
}

fn dot1<T: Real>(w: &[T], m: &[T]) -> T {
    let n = w.len();
    let chunks = n / LANES;
    let mut acc = [T::zero(); LANES];
    for c in 0..chunks {
        let a = chunk(w, c);
        let b = chunk(m, c);
        for l in 0..LANES {
            acc[l] = acc[l] + a[l] * b[l];
        }
    }
    let mut out = sum_lanes(acc);
    for j in chunks * LANES..n {
        out = out + w[j] * m[j];
    }
    out
}

/// `dst += a0*m0 + a1*m1 + a2*m2 + a3*m3` elementwise.
fn axpy4<T: Real>(dst: &mut [T], a: [T; 4], m0: &[T], m1: &[T], m2: &[T], m3: &[T]) {
    for ((((d, &v0), &v1), &v2), &v3) in dst
        .iter_mut()
        .zip(m0.iter())
        .zip(m1.iter())
        .zip(m2.iter())
        .zip(m3.iter())
    {
        *d = *d + a[0] * v0 + a[1] * v1 + a[2] * v2 + a[3] * v3;
    }
}

fn axpy1<T: Real>(dst: &mut [T], a: T, m: &[T]) {
    for (d, &v) in dst.iter_mut().zip(m.iter()) {
        *d = *d + a * v;
    }
}

/// Patch matrix of a valid convolution: one row per output position, one
/// column per `(channel, ky, kx)`. Rows are `row_stride` apart so a padded
/// layout can keep dot lengths at a full lane multiple.
fn im2col<T: Real>(
    input: &[T],
    channels: usize,
    in_side: usize,
    out_side: usize,
    dst: &mut [T],
    row_stride: usize,
) {
    let k = KERNEL;
    for y in 0..out_side {
        for x in 0..out_side {
            let row = &mut dst[(y * out_side + x) * row_stride..];
            let mut off = 0;
            for c in 0..channels {
                let plane = &input[c * in_side * in_side..(c + 1) * in_side * in_side];
                for ky in 0..k {
                    let src = &plane[(y + ky) * in_side + x..(y + ky) * in_side + x + k];
                    row[off..off + k].copy_from_slice(src);
                    off += k;
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add patch-gradient rows back to the input.
fn col2im<T: Real>(dcol: &[T], channels: usize, in_side: usize, out_side: usize, dinput: &mut [T]) {
    let k = KERNEL;
    let cols = channels * k * k;
    for y in 0..out_side {
        for x in 0..out_side {
            let row = &dcol[(y * out_side + x) * cols..(y * out_side + x + 1) * cols];
            let mut off = 0;
            for c in 0..channels {
                let plane = &mut dinput[c * in_side * in_side..(c + 1) * in_side * in_side];
                for ky in 0..k {
                    let dst = &mut plane[(y + ky) * in_side + x..(y + ky) * in_side + x + k];
                    for (d, &s) in dst.iter_mut().zip(&row[off..off + k]) {
                        *d = *d + s;
                    }
                    off += k;
                }
            }
        }
    }
}

/// `out[o * p + q] = bias[o] + dot(weights_row_o, m_row_q)` with the patch
/// matrix rows `m_stride` apart.
fn conv_gemm<T: Real>(
    m: &[T],
    m_stride: usize,
    w: &[T],
    bias: &[T],
    out: &mut [T],
    p: usize,
    o: usize,
    k: usize,
) {
    let mut q = 0;
    while q + 4 <= p {
        let m0 = &m[q * m_stride..q * m_stride + k];
        let m1 = &m[(q + 1) * m_stride..(q + 1) * m_stride + k];
        let m2 = &m[(q + 2) * m_stride..(q + 2) * m_stride + k];
        let m3 = &m[(q + 3) * m_stride..(q + 3) * m_stride + k];
        for oc in 0..o {
            let dots = dot4(&w[oc * k..(oc + 1) * k], m0, m1, m2, m3);
            let base = oc * p + q;
            for (slot, d) in out[base..base + 4].iter_mut().zip(dots) {
                *slot = bias[oc] + d;
            }
        }
        q += 4;
    }
    while q < p {
        let mq = &m[q * m_stride..q * m_stride + k];
        for oc in 0..o {
            out[oc * p + q] = bias[oc] + dot1(&w[oc * k..(oc + 1) * k], mq);
        }
        q += 1;
    }
}

/// ReLU then 2x2 max-pool with ties broken toward the lowest offset.
fn relu_pool<T: Real>(
    pre: &[T],
    channels: usize,
    side: usize,
    relu_buf: &mut [T],
    pooled: &mut [T],
    idx: &mut [u32],
) {
    let half = side / 2;
    let plane = side * side;
    for c in 0..channels {
        let src = &pre[c * plane..(c + 1) * plane];
        let act = &mut relu_buf[c * plane..(c + 1) * plane];
        for (a, &v) in act.iter_mut().zip(src) {
            *a = v.max(T::zero());
        }
        for py in 0..half {
            for px in 0..half {
                let candidates = [
                    (2 * py) * side + 2 * px,
                    (2 * py) * side + 2 * px + 1,
                    (2 * py + 1) * side + 2 * px,
                    (2 * py + 1) * side + 2 * px + 1,
                ];
                let mut best = candidates[0];
                let mut best_v = act[best];
                for &cand in &candidates[1..] {
                    if act[cand] > best_v {
                        best = cand;
                        best_v = act[cand];
                    }
                }
                pooled[c * half * half + py * half + px] = best_v;
                idx[c * half * half + py * half + px] = best as u32;
            }
        }
    }
}

/// Routes pooled gradients back to the winning pre-activation positions,
/// applying the ReLU mask.
fn pool_relu_backward<T: Real>(
    dpool: &[T],
    pre: &[T],
    idx: &[u32],
    channels: usize,
    side: usize,
    dpre: &mut [T],
) {
    let half = side / 2;
    let plane = side * side;
    dpre.iter_mut().for_each(|v| *v = T::zero());
    for c in 0..channels {
        let pre_plane = &pre[c * plane..(c + 1) * plane];
        let dpre_plane = &mut dpre[c * plane..(c + 1) * plane];
        for q in 0..half * half {
            let at = idx[c * half * half + q] as usize;
            if pre_plane[at] > T::zero() {
                dpre_plane[at] = dpre_plane[at] + dpool[c * half * half + q];
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Forward / backward
// ---------------------------------------------------------------------------

/// Runs the network on a batch, caching activations in `ws`.
pub fn forward_into<T: Real>(params: &ModelArrays<T>, batch: &Batch, ws: &mut NnWorkspace<T>) {
    let b = batch.len();
    ws.ensure(b);
    // First-layer weights in the padded GEMM layout; pad columns stay zero.
    for (oc, row) in params.conv1_w.chunks_exact(K1).enumerate() {
        ws.w1_pad[oc * K1P..oc * K1P + K1].copy_from_slice(row);
    }
    let mut input1 = [T::zero(); IN_PIXELS];
    for img in 0..b {
        for (dst, &v) in input1.iter_mut().zip(batch.image(img)) {
            *dst = T::from_f64(v);
        }
        forward_one(params, &input1, img, ws);
    }
}

fn forward_one<T: Real>(params: &ModelArrays<T>, input: &[T], img: usize, ws: &mut NnWorkspace<T>) {
    let conv1_pre = &mut ws.conv1_pre[img * CONV1_OUT * P1..(img + 1) * CONV1_OUT * P1];
    im2col(input, 1, IN_SIDE, C1_SIDE, &mut ws.im2col1, K1P);
    conv_gemm(
        &ws.im2col1,
        K1P,
        &ws.w1_pad,
        &params.conv1_b,
        conv1_pre,
        P1,
        CONV1_OUT,
        K1P,
    );
    let pool1 =
        &mut ws.pool1[img * CONV1_OUT * P1_SIDE * P1_SIDE..(img + 1) * CONV1_OUT * P1_SIDE * P1_SIDE];
    let idx1 = &mut ws.pool1_idx
        [img * CONV1_OUT * P1_SIDE * P1_SIDE..(img + 1) * CONV1_OUT * P1_SIDE * P1_SIDE];
    relu_pool(conv1_pre, CONV1_OUT, C1_SIDE, &mut ws.relu_plane, pool1, idx1);

    let conv2_pre = &mut ws.conv2_pre[img * CONV2_OUT * P2..(img + 1) * CONV2_OUT * P2];
    im2col(pool1, CONV1_OUT, P1_SIDE, C2_SIDE, &mut ws.im2col2, K2);
    conv_gemm(
        &ws.im2col2,
        K2,
        &params.conv2_w,
        &params.conv2_b,
        conv2_pre,
        P2,
        CONV2_OUT,
        K2,
    );
    let pool2 = &mut ws.pool2[img * FC_IN..(img + 1) * FC_IN];
    let idx2 = &mut ws.pool2_idx
        [img * CONV2_OUT * P2_SIDE * P2_SIDE..(img + 1) * CONV2_OUT * P2_SIDE * P2_SIDE];
    relu_pool(conv2_pre, CONV2_OUT, C2_SIDE, &mut ws.relu_plane, pool2, idx2);

    let logits = &mut ws.logits[img * NUM_CLASSES..(img + 1) * NUM_CLASSES];
    let mut cls = 0;
    while cls + 4 <= NUM_CLASSES {
        let dots = dot4(
            pool2,
            &params.fc_w[cls * FC_IN..(cls + 1) * FC_IN],
            &params.fc_w[(cls + 1) * FC_IN..(cls + 2) * FC_IN],
            &params.fc_w[(cls + 2) * FC_IN..(cls + 3) * FC_IN],
            &params.fc_w[(cls + 3) * FC_IN..(cls + 4) * FC_IN],
        );
        for j in 0..4 {
            logits[cls + j] = params.fc_b[cls + j] + dots[j];
        }
        cls += 4;
    }
    while cls < NUM_CLASSES {
        logits[cls] = params.fc_b[cls] + dot1(&params.fc_w[cls * FC_IN..(cls + 1) * FC_IN], pool2);
        cls += 1;
    }
}

/// Mean softmax cross-entropy of cached logits; fills `dlogits` with
/// `(softmax - onehot) / B` when requested.
fn cross_entropy<T: Real>(ws: &mut NnWorkspace<T>, labels: &[u8], want_grad: bool) -> f64 {
    let b = labels.len();
    let inv_b = T::from_f64(1.0 / b as f64);
    let mut loss = 0.0f64;
    for img in 0..b {
        let logits = &ws.logits[img * NUM_CLASSES..(img + 1) * NUM_CLASSES];
        let mut max = logits[0];
        for &v in &logits[1..] {
            if v > max {
                max = v;
            }
        }
        let mut sum = T::zero();
        let mut exps = [T::zero(); NUM_CLASSES];
        for (e, &v) in exps.iter_mut().zip(logits) {
            *e = (v - max).exp();
            sum = sum + *e;
        }
        let label = labels[img] as usize;
        loss += (sum.ln() - (logits[label] - max)).to_f64();
        if want_grad {
            let d = &mut ws.dlogits[img * NUM_CLASSES..(img + 1) * NUM_CLASSES];
            let inv_sum = T::one() / sum;
            for (dv, &e) in d.iter_mut().zip(&exps) {
                *dv = e * inv_sum * inv_b;
            }
            d[label] = d[label] - inv_b;
        }
    }
    loss / b as f64
}

/// Loss of the cached forward pass without gradient work.
pub fn loss_from_workspace<T: Real>(ws: &mut NnWorkspace<T>, labels: &[u8]) -> f64 {
    cross_entropy(ws, labels, false)
}

/// Full backward pass. Requires `ws` to hold the forward cache of `batch`;
/// overwrites `grads` with the mean-loss gradients and returns the loss.
pub fn backward_into<T: Real>(
    params: &ModelArrays<T>,
    batch: &Batch,
    ws: &mut NnWorkspace<T>,
    grads: &mut ModelArrays<T>,
) -> f64 {
    let b = batch.len();
    debug_assert_eq!(ws.batch, b);
    let loss = cross_entropy(ws, batch.labels(), true);
    grads.zero_out();
    let mut input1 = [T::zero(); IN_PIXELS];
    for img in 0..b {
        let dlogits: [T; NUM_CLASSES] = ws.dlogits[img * NUM_CLASSES..(img + 1) * NUM_CLASSES]
            .try_into()
            .unwrap();
        let pool2 = &ws.pool2[img * FC_IN..(img + 1) * FC_IN];

        // Dense layer: weight/bias gradients and the pooled-feature gradient.
        let dpool2 = &mut ws.dplane2[..FC_IN];
        dpool2.iter_mut().for_each(|v| *v = T::zero());
        for cls in 0..NUM_CLASSES {
            let d = dlogits[cls];
            axpy1(&mut grads.fc_w[cls * FC_IN..(cls + 1) * FC_IN], d, pool2);
            grads.fc_b[cls] = grads.fc_b[cls] + d;
            axpy1(dpool2, d, &params.fc_w[cls * FC_IN..(cls + 1) * FC_IN]);
        }

        // Second pool/ReLU, then the second convolution.
        let conv2_pre = &ws.conv2_pre[img * CONV2_OUT * P2..(img + 1) * CONV2_OUT * P2];
        let idx2 = &ws.pool2_idx
            [img * CONV2_OUT * P2_SIDE * P2_SIDE..(img + 1) * CONV2_OUT * P2_SIDE * P2_SIDE];
        let mut dconv2 = std::mem::take(&mut ws.dplane1);
        let dconv2_pre = &mut dconv2[..CONV2_OUT * P2];
        {
            let dpool2 = &ws.dplane2[..FC_IN];
            pool_relu_backward(dpool2, conv2_pre, idx2, CONV2_OUT, C2_SIDE, dconv2_pre);
        }

        let pool1 =
            &ws.pool1[img * CONV1_OUT * P1_SIDE * P1_SIDE..(img + 1) * CONV1_OUT * P1_SIDE * P1_SIDE];
        im2col(pool1, CONV1_OUT, P1_SIDE, C2_SIDE, &mut ws.im2col2, K2);
        ws.dcol.iter_mut().for_each(|v| *v = T::zero());
        for oc in 0..CONV2_OUT {
            let drow = &dconv2_pre[oc * P2..(oc + 1) * P2];
            let wrow = &params.conv2_w[oc * K2..(oc + 1) * K2];
            let gw = &mut grads.conv2_w[oc * K2..(oc + 1) * K2];
            let mut db = T::zero();
            let mut q = 0;
            while q + 4 <= P2 {
                let a = [drow[q], drow[q + 1], drow[q + 2], drow[q + 3]];
                db = db + a[0] + a[1] + a[2] + a[3];
                axpy4(
                    gw,
                    a,
                    &ws.im2col2[q * K2..(q + 1) * K2],
                    &ws.im2col2[(q + 1) * K2..(q + 2) * K2],
                    &ws.im2col2[(q + 2) * K2..(q + 3) * K2],
                    &ws.im2col2[(q + 3) * K2..(q + 4) * K2],
                );
                q += 4;
            }
            // Patch gradients for the layer below.
            for q in 0..P2 {
                let d = drow[q];
                if d != T::zero() {
                    axpy1(&mut ws.dcol[q * K2..(q + 1) * K2], d, wrow);
                }
            }
            grads.conv2_b[oc] = grads.conv2_b[oc] + db;
        }
        ws.dpool1.iter_mut().for_each(|v| *v = T::zero());
        col2im(&ws.dcol, CONV1_OUT, P1_SIDE, C2_SIDE, &mut ws.dpool1);

        // First pool/ReLU and convolution; the image gradient is not needed.
        let conv1_pre = &ws.conv1_pre[img * CONV1_OUT * P1..(img + 1) * CONV1_OUT * P1];
        let idx1 = &ws.pool1_idx
            [img * CONV1_OUT * P1_SIDE * P1_SIDE..(img + 1) * CONV1_OUT * P1_SIDE * P1_SIDE];
        let dconv1_pre = &mut dconv2[..CONV1_OUT * P1];
        pool_relu_backward(&ws.dpool1, conv1_pre, idx1, CONV1_OUT, C1_SIDE, dconv1_pre);

        for (dst, &v) in input1.iter_mut().zip(batch.image(img)) {
            *dst = T::from_f64(v);
        }
        im2col(&input1, 1, IN_SIDE, C1_SIDE, &mut ws.im2col1, K1P);
        for oc in 0..CONV1_OUT {
            let drow = &dconv1_pre[oc * P1..(oc + 1) * P1];
            let gw = &mut grads.conv1_w[oc * K1..(oc + 1) * K1];
            let mut db = T::zero();
            let mut q = 0;
            while q + 4 <= P1 {
                let a = [drow[q], drow[q + 1], drow[q + 2], drow[q + 3]];
                db = db + a[0] + a[1] + a[2] + a[3];
                axpy4(
                    gw,
                    a,
                    &ws.im2col1[q * K1P..q * K1P + K1],
                    &ws.im2col1[(q + 1) * K1P..(q + 1) * K1P + K1],
                    &ws.im2col1[(q + 2) * K1P..(q + 2) * K1P + K1],
                    &ws.im2col1[(q + 3) * K1P..(q + 3) * K1P + K1],
                );
                q += 4;
            }
            grads.conv1_b[oc] = grads.conv1_b[oc] + db;
        }
        ws.dplane1 = dconv2;
    }
    loss
}

/// Class predictions from cached logits, ties toward the lowest class.
pub fn predictions<T: Real>(ws: &NnWorkspace<T>) -> Vec<u8> {
    (0..ws.batch)
        .map(|img| {
            let logits = ws.sample_logits(img);
            let mut best = 0usize;
            for (c, &v) in logits.iter().enumerate().skip(1) {
                if v > logits[best] {
                    best = c;
                }
            }
            best as u8
        })
        .collect()
}

/// Forward pass on the 64-bit surface: returns logits and cached
/// activations.
pub fn forward(params: &ModelParams, batch: &Batch) -> Result<NnWorkspace<f64>> {
    let arrays = ModelArrays::<f64>::from_params(params);
    let mut ws = NnWorkspace::new();
    forward_into(&arrays, batch, &mut ws);
    Ok(ws)
}

/// Mean softmax cross-entropy and its gradient for every parameter tensor.
pub fn loss_and_grads(params: &ModelParams, batch: &Batch) -> Result<(f64, ModelParams)> {
    let arrays = ModelArrays::<f64>::from_params(params);
    let mut ws = NnWorkspace::new();
    forward_into(&arrays, batch, &mut ws);
    let mut grads = ModelArrays::<f64>::zeros();
    let loss = backward_into(&arrays, batch, &mut ws, &mut grads);
    Ok((loss, grads.to_params()))
}
