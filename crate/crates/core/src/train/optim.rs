//! Adam with decoupled weight decay and global-norm gradient clipping.

use crate::error::{AeroError, Result};
use crate::model::ParamStore;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig { lr: 3e-4, beta1: 0.9, beta2: 0.95, eps: 1e-8, weight_decay: 0.1 }
    }
}

#[derive(Clone, Debug)]
pub struct AdamW {
    pub cfg: AdamWConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig, params: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = params.iter().map(|p| vec![0.0; p.tensor.numel()]).collect();
        AdamW { cfg, step: 0, m: zeros.clone(), v: zeros }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update from the gradients stored on each parameter.
    pub fn step(&mut self, params: &mut ParamStore) -> Result<()> {
        if self.m.len() != params.len() {
            return Err(AeroError::Internal("optimizer state does not match the parameters".into()));
        }
        self.step += 1;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for ((p, m), v) in params.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let decay = if p.decay { c.lr * c.weight_decay } else { 0.0 };
            let grad = p.tensor.grad().map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; m.len()]);
            let data = p.tensor.data_mut();
            for i in 0..data.len() {
                let g = grad[i];
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g;
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g * g;
                let update = (m[i] / bc1) / ((v[i] / bc2).sqrt() + c.eps);
                data[i] -= decay * data[i] + c.lr * update;
            }
        }
        Ok(())
    }
}

/// Euclidean norm of all gradients together.
pub fn global_grad_norm(params: &ParamStore) -> f64 {
    params
        .iter()
        .filter_map(|p| p.tensor.grad())
        .flat_map(|g| g.iter())
        .map(|g| g * g)
        .sum::<f64>()
        .sqrt()
}

/// Rescales gradients so their global norm is at most `max_norm`; returns
/// the norm before clipping.
pub fn clip_grad_norm(params: &mut ParamStore, max_norm: f64) -> Result<f64> {
    let norm = global_grad_norm(params);
    if norm > max_norm && norm.is_finite() {
        let scale = max_norm / norm;
        for p in params.iter_mut() {
            if let Some(g) = p.tensor.grad() {
                let scaled = g.iter().map(|x| x * scale).collect();
                p.tensor.set_grad(scaled)?;
            }
        }
    }
    Ok(norm)
}
