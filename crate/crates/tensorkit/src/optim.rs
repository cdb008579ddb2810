use crate::{Result, TensorError};

/// AdamW hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamW {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        Self { lr: 1e-3, weight_decay: 0.05, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First and second moment buffers of one parameter tensor.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self { m: vec![0.0; len], v: vec![0.0; len], step: 0 }
    }
}

/// One decoupled-weight-decay Adam update:
/// `p ← p − lr·(m̂/(√v̂+ε) + wd·p)`.
///
/// A non-finite gradient rejects the whole step and leaves `params` and
/// `state` untouched.
pub fn adamw_step(params: &mut [f64], grads: &[f64], state: &mut AdamState, hp: &AdamW) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() || state.v.len() != params.len() {
        return Err(TensorError::Dimension(format!(
            "adamw: {} params, {} grads, state {}/{}",
            params.len(),
            grads.len(),
            state.m.len(),
            state.v.len()
        )));
    }
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        return Err(TensorError::NonFinite(format!("gradient entry {i} is {}", grads[i])));
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - hp.beta1.powi(t);
    let bc2 = 1.0 - hp.beta2.powi(t);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = hp.beta1 * state.m[i] + (1.0 - hp.beta1) * g;
        state.v[i] = hp.beta2 * state.v[i] + (1.0 - hp.beta2) * g * g;
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        params[i] -= hp.lr * (m_hat / (v_hat.sqrt() + hp.eps) + hp.weight_decay * params[i]);
    }
    Ok(())
}

/// Polynomial decay `lr0 · (1 − step/total)^power`.
///
/// Steps past `total` (or an empty schedule) yield 0 with a warning.
pub fn poly_decay_lr(step: usize, total: usize, lr0: f64, power: f64) -> f64 {
    if total == 0 || step > total {
        log::warn!("poly_decay_lr: step {step} outside schedule of {total}; clamping to 0");
        return 0.0;
    }
    lr0 * (1.0 - step as f64 / total as f64).powf(power)
}
