use serde::{Deserialize, Serialize};

use super::tensor::Params;
use crate::error::{Error, Result};

/// Adam optimiser state with bias-corrected moment estimates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    first: Params,
    second: Params,
}

impl AdamState {
    /// Fresh state shaped like `params` with the usual defaults
    /// (β1 = 0.9, β2 = 0.999, ε = 1e-8).
    pub fn new(params: &Params) -> Self {
        Self::with_hyperparameters(params, 0.9, 0.999, 1e-8)
    }

    pub fn with_hyperparameters(params: &Params, beta1: f64, beta2: f64, epsilon: f64) -> Self {
        Self {
            step: 0,
            beta1,
            beta2,
            epsilon,
            first: params.zeros_like(),
            second: params.zeros_like(),
        }
    }

    /// Applies one update in place.
    pub fn step(&mut self, params: &mut Params, grads: &Params, lr: f64) -> Result<()> {
        params.check_same_layout(grads)?;
        params.check_same_layout(&self.first)?;
        if !(lr >= 0.0) {
            return Err(Error::InvalidConfig(format!("learning rate {lr}")));
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, eps) = (self.beta1, self.beta2, self.epsilon);
        for (((_, p), (_, g)), ((_, m), (_, v))) in params
            .iter_mut()
            .zip(grads.iter())
            .zip(self.first.iter_mut().zip(self.second.iter_mut()))
        {
            for i in 0..p.values.len() {
                let gi = g.values[i];
                m.values[i] = b1 * m.values[i] + (1.0 - b1) * gi;
                v.values[i] = b2 * v.values[i] + (1.0 - b2) * gi * gi;
                let m_hat = m.values[i] / c1;
                let v_hat = v.values[i] / c2;
                p.values[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Functional form: returns updated parameters and state.
pub fn adam_step(params: &Params, grads: &Params, state: &AdamState, lr: f64) -> Result<(Params, AdamState)> {
    let mut p = params.clone();
    let mut s = state.clone();
    s.step(&mut p, grads, lr)?;
    Ok((p, s))
}
