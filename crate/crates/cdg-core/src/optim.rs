//! Optimizers that consume preconditioned gradients.
//!
//! A step first maps the raw gradient through the configured preconditioner,
//! then applies weight decay, momentum or Adam moments, and finally the
//! forward-Euler parameter update. Preconditioning acts on the raw loss
//! gradient only — before weight decay and momentum — mirroring how a
//! gradient hook composes with a stock optimizer.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::precondition::{precondition, PrecondConfig};
use crate::tensor::Tensor4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 5e-4,
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::invalid(format!("lr must be > 0, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid(format!(
                "momentum must be in [0, 1), got {}",
                self.momentum
            )));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::invalid(format!(
                "weight decay must be >= 0, got {}",
                self.weight_decay
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 0.0,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::invalid(format!("lr must be > 0, got {}", self.lr)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::invalid(format!("{} must be in [0, 1), got {}", name, b)));
            }
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::invalid(format!(
                "epsilon must be > 0, got {}",
                self.epsilon
            )));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::invalid(format!(
                "weight decay must be >= 0, got {}",
                self.weight_decay
            )));
        }
        Ok(())
    }
}

/// Per-parameter optimizer buffers. All buffers are allocated at the
/// parameter's shape; SGD touches only the momentum buffer, Adam only the
/// moment buffers.
#[derive(Debug, Clone)]
pub struct OptimState {
    pub momentum: Tensor4,
    pub adam_m: Tensor4,
    pub adam_v: Tensor4,
    pub step: u64,
}

impl OptimState {
    pub fn new(dims: [usize; 4]) -> Result<Self> {
        Ok(OptimState {
            momentum: Tensor4::zeros(dims)?,
            adam_m: Tensor4::zeros(dims)?,
            adam_v: Tensor4::zeros(dims)?,
            step: 0,
        })
    }
}

fn check_shapes(param: &Tensor4, grad: &Tensor4, state: &OptimState) -> Result<()> {
    if param.dims() != grad.dims() || param.dims() != state.momentum.dims() {
        return Err(Error::invalid(format!(
            "shape mismatch: param {:?}, grad {:?}, state {:?}",
            param.dims(),
            grad.dims(),
            state.momentum.dims()
        )));
    }
    Ok(())
}

/// One SGD step with momentum and weight decay on a preconditioned gradient.
pub fn sgd_step(
    param: &mut Tensor4,
    raw_grad: &Tensor4,
    state: &mut OptimState,
    hyper: &SgdConfig,
    pre: &PrecondConfig,
) -> Result<()> {
    hyper.validate()?;
    check_shapes(param, raw_grad, state)?;
    let mut g = precondition(raw_grad, pre)?;
    if hyper.weight_decay != 0.0 {
        g.add_scaled(param, hyper.weight_decay)?;
    }
    let mu = hyper.momentum;
    for (buf, &gv) in state.momentum.data_mut().iter_mut().zip(g.data()) {
        *buf = mu * *buf + gv;
    }
    param.add_scaled(&state.momentum, -hyper.lr)?;
    state.step += 1;
    Ok(())
}

/// One Adam step on a preconditioned gradient, with bias correction.
pub fn adam_step(
    param: &mut Tensor4,
    raw_grad: &Tensor4,
    state: &mut OptimState,
    hyper: &AdamConfig,
    pre: &PrecondConfig,
) -> Result<()> {
    hyper.validate()?;
    check_shapes(param, raw_grad, state)?;
    let mut g = precondition(raw_grad, pre)?;
    if hyper.weight_decay != 0.0 {
        g.add_scaled(param, hyper.weight_decay)?;
    }
    let t = state.step + 1;
    let (b1, b2) = (hyper.beta1, hyper.beta2);
    let corr1 = 1.0 - b1.powi(t as i32);
    let corr2 = 1.0 - b2.powi(t as i32);
    let m = state.adam_m.data_mut();
    let v = state.adam_v.data_mut();
    let p = param.data_mut();
    for j in 0..p.len() {
        let gv = g.data()[j];
        m[j] = b1 * m[j] + (1.0 - b1) * gv;
        v[j] = b2 * v[j] + (1.0 - b2) * gv * gv;
        let m_hat = m[j] / corr1;
        let v_hat = v[j] / corr2;
        p[j] -= hyper.lr * m_hat / (v_hat.sqrt() + hyper.epsilon);
    }
    state.step = t;
    Ok(())
}

/// Step-decay learning-rate multiplier: `10^-floor(epoch / period)`.
/// A period of zero disables decay.
pub fn lr_schedule(epoch: usize, period: usize) -> f64 {
    if period == 0 {
        return 1.0;
    }
    10f64.powi(-((epoch / period) as i32))
}
