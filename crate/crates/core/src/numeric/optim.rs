use std::f64::consts::PI;

use super::params::Param;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Adam moments and hyper-parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub first: Vec<Tensor>,
    pub second: Vec<Tensor>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(params: &[Param], beta1: f64, beta2: f64, eps: f64) -> Self {
        AdamState {
            first: params.iter().map(|p| Tensor::zeros(p.value.shape())).collect(),
            second: params.iter().map(|p| Tensor::zeros(p.value.shape())).collect(),
            step: 0,
            beta1,
            beta2,
            eps,
        }
    }

    /// β1 = 0.9, β2 = 0.98, ε = 1e-9.
    pub fn with_defaults(params: &[Param]) -> Self {
        Self::new(params, 0.9, 0.98, 1e-9)
    }
}

/// One bias-corrected Adam update using each parameter's `grad`.
pub fn adam_step(params: &mut [Param], state: &mut AdamState, lr: f64) -> Result<()> {
    if params.len() != state.first.len() {
        return Err(Error::Shape(format!(
            "adam state tracks {} parameters, got {}",
            state.first.len(),
            params.len()
        )));
    }
    state.step += 1;
    let t = state.step as f64;
    let c1 = 1.0 - state.beta1.powf(t);
    let c2 = 1.0 - state.beta2.powf(t);
    for ((p, m), v) in params.iter_mut().zip(&mut state.first).zip(&mut state.second) {
        if m.shape() != p.value.shape() || p.grad.shape() != p.value.shape() {
            return Err(Error::Shape(format!("adam moments for `{}` misshaped", p.name)));
        }
        let g = p.grad.data();
        let m = m.data_mut();
        let v = v.data_mut();
        let w = p.value.data_mut();
        for i in 0..w.len() {
            m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * g[i];
            v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * g[i] * g[i];
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            w[i] -= lr * m_hat / (v_hat.sqrt() + state.eps);
        }
    }
    Ok(())
}

/// Linear warmup to `peak`, then half-cosine decay to zero over `decay_steps`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrSchedule {
    pub peak: f64,
    pub warmup_steps: u64,
    pub decay_steps: u64,
}

impl LrSchedule {
    pub fn new(peak: f64, warmup_steps: u64, decay_steps: u64) -> Result<Self> {
        if warmup_steps < 1 || decay_steps < 1 {
            return Err(Error::Config(format!(
                "warmup ({warmup_steps}) and decay ({decay_steps}) steps must be at least 1"
            )));
        }
        Ok(LrSchedule {
            peak,
            warmup_steps,
            decay_steps,
        })
    }
}

pub fn lr_at_step(step: u64, sched: &LrSchedule) -> f64 {
    if step < sched.warmup_steps {
        return sched.peak * step as f64 / sched.warmup_steps as f64;
    }
    let into = step - sched.warmup_steps;
    if into >= sched.decay_steps {
        return 0.0;
    }
    0.5 * sched.peak * (1.0 + (PI * into as f64 / sched.decay_steps as f64).cos())
}
