use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};

/// Adaptive-moment optimiser state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
    pub step: u64,
    pub learning_rate: f64,
    pub anneal: bool,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl OptimizerState {
    pub fn new(num_params: usize, learning_rate: f64, anneal: bool) -> Self {
        Self {
            first_moment: vec![0.0; num_params],
            second_moment: vec![0.0; num_params],
            step: 0,
            learning_rate,
            anneal,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-5,
        }
    }

    /// Learning rate for `iteration` (0-based) out of `total`: linear decay
    /// from the base rate at iteration 0 to zero at iteration `total`.
    pub fn lr_at(&self, iteration: usize, total: usize) -> f64 {
        if !self.anneal || total == 0 {
            return self.learning_rate;
        }
        let frac = 1.0 - (iteration.min(total) as f64) / total as f64;
        self.learning_rate * frac
    }
}

/// One bias-corrected Adam update with step size `lr`.
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut OptimizerState, lr: f64) -> Result<()> {
    if params.len() != grads.len() || state.first_moment.len() != params.len() {
        return Err(LabError::ShapeMismatch("adam parameter/gradient lengths".into()));
    }
    if grads.iter().any(|g| !g.is_finite()) {
        return Err(LabError::NonFiniteGradient);
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - state.beta1.powi(t);
    let c2 = 1.0 - state.beta2.powi(t);
    for i in 0..params.len() {
        let g = grads[i];
        let m = &mut state.first_moment[i];
        *m = state.beta1 * *m + (1.0 - state.beta1) * g;
        let v = &mut state.second_moment[i];
        *v = state.beta2 * *v + (1.0 - state.beta2) * g * g;
        let m_hat = state.first_moment[i] / c1;
        let v_hat = state.second_moment[i] / c2;
        params[i] -= lr * m_hat / (v_hat.sqrt() + state.eps);
    }
    Ok(())
}

pub fn global_norm(grads: &[f64]) -> f64 {
    grads.iter().map(|g| g * g).sum::<f64>().sqrt()
}

/// Rescales `grads` in place so that their global L2 norm is at most
/// `max_norm`. Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut [f64], max_norm: f64) -> f64 {
    assert!(max_norm > 0.0, "max_norm must be positive");
    let norm = global_norm(grads);
    if norm > max_norm {
        let k = max_norm / norm;
        grads.iter_mut().for_each(|g| *g *= k);
    }
    norm
}
