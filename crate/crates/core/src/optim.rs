//! Adam with bias correction.

use serde::{Deserialize, Serialize};

use crate::error::{EdpaError, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    /// One bias-corrected update of every tensor in `params` with the
    /// matching flat gradient. Moments are allocated on the first call.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Vec<f64>], lr: f64) -> Result<()> {
        if params.len() != grads.len() {
            return Err(EdpaError::Config(format!(
                "adam got {} parameter tensors but {} gradients",
                params.len(),
                grads.len()
            )));
        }
        for (k, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.numel() != g.len() {
                return Err(EdpaError::ShapeMismatch {
                    op: "adam_step",
                    lhs: p.shape().to_vec(),
                    rhs: vec![g.len()],
                });
            }
            if let Some(i) = g.iter().position(|v| !v.is_finite()) {
                return Err(EdpaError::NonFinite {
                    what: format!("gradient of parameter {k}"),
                    iteration: self.step as usize,
                    detail: format!("entry {i} = {}", g[i]),
                });
            }
        }
        if self.first.is_empty() {
            self.first = grads.iter().map(|g| vec![0.0; g.len()]).collect();
            self.second = self.first.clone();
        } else if self.first.len() != grads.len() || self.first.iter().zip(grads).any(|(m, g)| m.len() != g.len()) {
            return Err(EdpaError::Config("adam moments shaped for different parameters".into()));
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.first.iter_mut().zip(self.second.iter_mut()))
        {
            for (k, x) in p.data_mut().iter_mut().enumerate() {
                let gk = g[k];
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * gk;
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * gk * gk;
                let m_hat = m[k] / c1;
                let v_hat = v[k] / c2;
                *x -= lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

impl Default for AdamState {
    fn default() -> Self {
        Self::new(0.9, 0.999, 1e-8)
    }
}

/// Free-function form of [`AdamState::step`].
pub fn adam_step(params: &mut [&mut Tensor], grads: &[Vec<f64>], state: &mut AdamState, lr: f64) -> Result<()> {
    state.step(params, grads, lr)
}
