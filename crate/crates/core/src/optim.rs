//! AdamW with decoupled weight decay and per-tensor learning rates.
//!
//! ```text
//! m = b1 m + (1 - b1) g
//! v = b2 v + (1 - b2) g^2
//! p = p - lr * (m_hat / (sqrt(v_hat) + eps) + wd * p)
//! ```
//! Weight decay applies to tensors named `*.weight` only (not biases, norms,
//! position tables or the mask token). A tensor whose learning rate is zero is
//! skipped entirely, so frozen tensors stay bit-identical.

use serde::{Deserialize, Serialize};

use crate::nn::ModelParams;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

pub struct AdamW {
    config: AdamWConfig,
    step: i32,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(params: &ModelParams, config: AdamWConfig) -> Self {
        let zeros: Vec<Vec<f64>> = params.tensors().iter().map(|t| vec![0.0; t.data.len()]).collect();
        Self {
            config,
            step: 0,
            first: zeros.clone(),
            second: zeros,
        }
    }

    pub fn steps_taken(&self) -> i32 {
        self.step
    }

    /// One update. `lr_of` maps a tensor name to its learning rate.
    pub fn step(&mut self, params: &mut ModelParams, grads: &ModelParams, lr_of: impl Fn(&str) -> f64) {
        self.step += 1;
        let c = &self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step);
        let bc2 = 1.0 - c.beta2.powi(self.step);
        let tensors = params.tensors_mut();
        let grad_tensors = grads.tensors();
        for (i, (p, g)) in tensors.into_iter().zip(grad_tensors).enumerate() {
            let lr = lr_of(&p.name);
            if lr == 0.0 {
                continue;
            }
            let wd = if p.name.ends_with(".weight") {
                c.weight_decay
            } else {
                0.0
            };
            let (m, v) = (&mut self.first[i], &mut self.second[i]);
            for j in 0..p.data.len() {
                let gj = g.data[j];
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * gj;
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * gj * gj;
                let update = (m[j] / bc1) / ((v[j] / bc2).sqrt() + c.eps);
                p.data[j] -= lr * (update + wd * p.data[j]);
            }
        }
    }
}

/// Linear warmup over `warmup` steps, then cosine decay to zero at `total`.
pub fn warmup_cosine(step: usize, total: usize, warmup: usize, base: f64) -> f64 {
    if step < warmup {
        return base * (step + 1) as f64 / warmup as f64;
    }
    let span = total.saturating_sub(warmup).max(1);
    let progress = ((step - warmup) as f64 / span as f64).min(1.0);
    base * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}
