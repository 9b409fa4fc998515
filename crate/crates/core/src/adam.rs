//! Bias-corrected Adam and exponential moving averages over flat parameters.

use crate::error::{CoreError, Result};
use crate::params::ParamVector;

#[derive(Debug, Clone)]
pub struct AdamState {
    first_moment: Vec<f64>,
    second_moment: Vec<f64>,
    step_count: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(param_len: usize, lr: f64) -> Self {
        Self {
            first_moment: vec![0.0; param_len],
            second_moment: vec![0.0; param_len],
            step_count: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }
}

/// One Adam update in place. Rejects non-finite gradients before touching any
/// state, so a failed step leaves `params` and `state` untouched.
pub fn adam_step(state: &mut AdamState, params: &mut ParamVector, grads: &ParamVector) -> Result<()> {
    assert_eq!(params.len(), grads.len(), "gradient length mismatch");
    assert_eq!(params.len(), state.first_moment.len(), "state length mismatch");

    if let Some(index) = grads.values().iter().position(|g| !g.is_finite()) {
        return Err(CoreError::NonFiniteGradient { index });
    }

    state.step_count += 1;
    let t = state.step_count as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);

    let pv = params.values_mut();
    let gv = grads.values();
    for i in 0..pv.len() {
        let g = gv[i];
        state.first_moment[i] = state.beta1 * state.first_moment[i] + (1.0 - state.beta1) * g;
        state.second_moment[i] = state.beta2 * state.second_moment[i] + (1.0 - state.beta2) * g * g;
        let m_hat = state.first_moment[i] / bc1;
        let v_hat = state.second_moment[i] / bc2;
        pv[i] -= state.lr * m_hat / (v_hat.sqrt() + state.eps);
    }
    Ok(())
}

/// Linear warmup over the first 5% of the run (at most 500 steps), then
/// cosine decay to 10% of the base rate.
pub fn warmup_cosine_lr(iter: usize, total: usize, base: f64) -> f64 {
    let warmup = (total / 20).clamp(1, 500);
    if iter < warmup {
        base * (iter + 1) as f64 / warmup as f64
    } else {
        let progress = (iter - warmup) as f64 / (total - warmup).max(1) as f64;
        base * (0.1 + 0.9 * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
    }
}

/// Elementwise τ·ema + (1−τ)·theta.
pub fn ema_update(ema: &ParamVector, theta: &ParamVector, tau: f64) -> ParamVector {
    let mut out = ema.clone();
    ema_update_in_place(&mut out, theta, tau);
    out
}

pub fn ema_update_in_place(ema: &mut ParamVector, theta: &ParamVector, tau: f64) {
    assert_eq!(ema.len(), theta.len(), "length mismatch");
    assert!((0.0..=1.0).contains(&tau), "tau out of range: {tau}");
    let ev = ema.values_mut();
    let tv = theta.values();
    for i in 0..ev.len() {
        ev[i] = tau * ev[i] + (1.0 - tau) * tv[i];
    }
}
