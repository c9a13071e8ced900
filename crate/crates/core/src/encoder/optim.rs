use serde::{Deserialize, Serialize};

use super::params::Params;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub peak_lr: f64,
    pub warmup_steps: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; disabled when absent.
    #[serde(default)]
    pub grad_clip: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            peak_lr: 2e-3,
            warmup_steps: 20,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-8,
            grad_clip: Some(5.0),
        }
    }
}

impl AdamConfig {
    /// Linear warmup to `peak_lr`, then inverse-square-root decay. `step`
    /// counts from 1.
    pub fn lr_at(&self, step: u64) -> f64 {
        let step = step.max(1) as f64;
        let warm = self.warmup_steps.max(1) as f64;
        self.peak_lr * (step / warm).min((warm / step).sqrt())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Params,
    pub v: Params,
}

impl AdamState {
    pub fn new(params: &Params) -> Self {
        Self {
            step: 0,
            m: Params::zeros_like(params),
            v: Params::zeros_like(params),
        }
    }

    /// One update; returns the learning rate used.
    pub fn update(&mut self, cfg: &AdamConfig, params: &mut Params, grads: &Params) -> f64 {
        self.step += 1;
        let lr = cfg.lr_at(self.step);
        let clip = match cfg.grad_clip {
            Some(max) => {
                let norm = grads.sq_norm().sqrt();
                if norm > max {
                    max / norm
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        let bc1 = 1.0 - cfg.beta1.powi(self.step as i32);
        let bc2 = 1.0 - cfg.beta2.powi(self.step as i32);
        for (name, p) in params.tensors.iter_mut() {
            let g = grads.get(name);
            let m = self.m.get_mut(name);
            let v = self.v.get_mut(name);
            ndarray::Zip::from(p).and(m).and(v).and(g).for_each(|p, m, v, &g| {
                let g = g * clip;
                *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
                *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
                let update = lr * (*m / bc1) / ((*v / bc2).sqrt() + cfg.eps);
                *p -= update;
            });
        }
        lr
    }
}
