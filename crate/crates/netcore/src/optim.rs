//! Adaptive-moment (Adam) descent.

use serde::{Deserialize, Serialize};

use crate::error::{NetError, Result};
use crate::params::{Grads, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam step, descending along `grads`.
///
/// Non-finite gradients are rejected before anything is modified.
pub fn optimizer_step(params: &mut ParamStore, grads: &Grads, cfg: &AdamConfig) -> Result<()> {
    assert_eq!(grads.0.len(), params.entries.len(), "grads not aligned with params");
    for (g, e) in grads.0.iter().zip(&params.entries) {
        assert_eq!(g.shape(), e.value.shape(), "gradient shape for `{}`", e.name);
        if !crate::all_finite(g) {
            return Err(NetError::NonFiniteGradient(e.name.clone()));
        }
    }
    params.step += 1;
    let t = params.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (g, e) in grads.0.iter().zip(params.entries.iter_mut()) {
        for ((w, m), (v, gi)) in e
            .value
            .iter_mut()
            .zip(e.m.iter_mut())
            .zip(e.v.iter_mut().zip(g.iter()))
        {
            *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * gi;
            *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * gi * gi;
            let mhat = *m / bc1;
            let vhat = *v / bc2;
            *w -= cfg.lr * mhat / (vhat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}
