//! Adam optimizer with bias correction and configurable weight decay.

use crate::error::{Error, Result};
use crate::numerics::tensor::Tensor;
use crate::numerics::Real;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub learning_rate: Real,
    pub weight_decay: Real,
    /// Apply weight decay directly to parameters (decoupled) instead of
    /// folding it into the gradient moments.
    pub decoupled_weight_decay: bool,
    pub beta1: Real,
    pub beta2: Real,
    pub epsilon: Real,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-4,
            weight_decay: 1e-4,
            decoupled_weight_decay: true,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Per-parameter first/second moment estimates plus the step counter.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl AdamState {
    /// Moments are allocated to match `params` shapes.
    pub fn new(config: AdamConfig, params: &[&Tensor]) -> Self {
        let m = params.iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect();
        let v = params.iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect();
        AdamState { config, step: 0, m, v }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One Adam update over all parameters. `params` and `grads` must
    /// match the shapes the state was created with.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[&Tensor]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::contract(format!(
                "adam: expected {} parameter tensors, got {} params / {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        for ((p, g), mo) in params.iter().zip(grads).zip(&self.m) {
            if p.shape() != g.shape() || p.shape() != mo.shape() {
                return Err(Error::contract(format!(
                    "adam: shape mismatch param {:?} grad {:?} moment {:?}",
                    p.shape(),
                    g.shape(),
                    mo.shape()
                )));
            }
        }
        self.step += 1;
        let c = &self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for i in 0..params.len() {
            let p = params[i].data_mut();
            let g = grads[i].data();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for j in 0..p.len() {
                let grad = if c.decoupled_weight_decay {
                    g[j]
                } else {
                    g[j] + c.weight_decay * p[j]
                };
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * grad;
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * grad * grad;
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                p[j] -= c.learning_rate * m_hat / (v_hat.sqrt() + c.epsilon);
                if c.decoupled_weight_decay {
                    p[j] -= c.learning_rate * c.weight_decay * p[j];
                }
            }
        }
        for p in params.iter() {
            p.check_finite("adam-updated parameter")?;
        }
        Ok(())
    }
}
