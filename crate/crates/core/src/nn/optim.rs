use serde::{Deserialize, Serialize};

use super::ParamStore;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    /// First-moment decay; 0 disables momentum.
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Rescale the gradient when its global L2 norm exceeds this value.
    pub clip_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, clip_norm: None }
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(config: AdamConfig, store: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = store.values().iter().map(|t| vec![0.0; t.numel()]).collect();
        Adam { config, step: 0, m: zeros.clone(), v: zeros }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update in place. Returns the pre-clip gradient norm.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Tensor]) -> Result<f64> {
        if grads.len() != self.m.len() {
            return Err(Error::invalid("Adam::step", format!("expected {} gradients, got {}", self.m.len(), grads.len())));
        }
        let norm = grads.iter().flat_map(|g| g.data().iter()).map(|g| g * g).sum::<f64>().sqrt();
        let clip = match self.config.clip_norm {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps, .. } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (i, value) in store.values_mut().iter_mut().enumerate() {
            let g = grads[i].data();
            if g.len() != self.m[i].len() {
                return Err(Error::shape("Adam::step", value.shape(), grads[i].shape()));
            }
            let mut data = value.to_vec();
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for k in 0..data.len() {
                let gk = g[k] * clip;
                m[k] = beta1 * m[k] + (1.0 - beta1) * gk;
                v[k] = beta2 * v[k] + (1.0 - beta2) * gk * gk;
                let mhat = m[k] / bc1;
                let vhat = v[k] / bc2;
                data[k] -= lr * mhat / (vhat.sqrt() + eps);
            }
            *value = Tensor::new(value.shape().to_vec(), data)?;
        }
        Ok(norm)
    }

    /// Moment buffers shaped like the parameters, for checkpointing.
    pub fn state(&self, store: &ParamStore) -> (u64, Vec<Tensor>, Vec<Tensor>) {
        let shaped = |bufs: &[Vec<f64>]| -> Vec<Tensor> {
            bufs.iter()
                .zip(store.values())
                .map(|(b, t)| Tensor::new(t.shape().to_vec(), b.clone()).expect("moment buffer matches parameter"))
                .collect()
        };
        (self.step, shaped(&self.m), shaped(&self.v))
    }

    pub fn restore(&mut self, step: u64, m: &[Tensor], v: &[Tensor]) -> Result<()> {
        if m.len() != self.m.len() || v.len() != self.v.len() {
            return Err(Error::Checkpoint(format!("expected {} optimizer moments, found {}/{}", self.m.len(), m.len(), v.len())));
        }
        for i in 0..m.len() {
            if m[i].numel() != self.m[i].len() || v[i].numel() != self.v[i].len() {
                return Err(Error::Checkpoint(format!("optimizer moment {i} has the wrong size")));
            }
        }
        self.step = step;
        self.m = m.iter().map(Tensor::to_vec).collect();
        self.v = v.iter().map(Tensor::to_vec).collect();
        Ok(())
    }
}
