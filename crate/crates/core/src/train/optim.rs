//! Decoupled-weight-decay Adam and the learning-rate schedule.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::autodiff::{GradStore, ParamId};
use crate::model::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Schedule {
    Cosine,
    Constant,
}

/// Learning rate at `step` of `total_steps`, with optional linear warmup.
pub fn lr_at(base: f64, schedule: Schedule, warmup_steps: u64, step: u64, total_steps: u64) -> f64 {
    if warmup_steps > 0 && step < warmup_steps {
        return base * (step + 1) as f64 / warmup_steps as f64;
    }
    match schedule {
        Schedule::Constant => base,
        Schedule::Cosine => {
            let t = (step - warmup_steps) as f64;
            let total = (total_steps.saturating_sub(warmup_steps)).max(1) as f64;
            let frac = (t / total).clamp(0.0, 1.0);
            base * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 }
    }
}

/// AdamW with first/second moment state per parameter. Parameters whose names
/// match a freeze prefix are skipped entirely.
pub struct AdamW {
    pub config: AdamWConfig,
    pub step: u64,
    pub m: Vec<Array2<f32>>,
    pub v: Vec<Array2<f32>>,
    frozen: Vec<bool>,
}

impl AdamW {
    pub fn new(params: &ParamStore<f32>, config: AdamWConfig, freeze: &[String]) -> Self {
        let mut m = Vec::with_capacity(params.len());
        let mut v = Vec::with_capacity(params.len());
        let mut frozen = Vec::with_capacity(params.len());
        for (_, name, arr) in params.iter() {
            m.push(Array2::zeros(arr.dim()));
            v.push(Array2::zeros(arr.dim()));
            frozen.push(freeze.iter().any(|p| name.starts_with(p.as_str())));
        }
        Self { config, step: 0, m, v, frozen }
    }

    pub fn is_frozen(&self, id: ParamId) -> bool {
        self.frozen[id.0]
    }

    pub fn n_frozen(&self) -> usize {
        self.frozen.iter().filter(|&&f| f).count()
    }

    /// One update. Gradients missing from the store (unused parameters this
    /// step) still advance their moment decay implicitly by being treated as
    /// zero.
    pub fn apply(&mut self, params: &mut ParamStore<f32>, grads: &GradStore<f32>, lr: f64) {
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let (b1, b2) = (c.beta1 as f32, c.beta2 as f32);
        let eps = c.eps as f32;
        let lr32 = lr as f32;
        let wd = c.weight_decay as f32;
        let (bc1, bc2) = (bc1 as f32, bc2 as f32);
        for i in 0..self.m.len() {
            let id = ParamId(i);
            if self.frozen[i] {
                continue;
            }
            let Some(g) = grads.get(id) else { continue };
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            let p = params.array_mut(id);
            ndarray::Zip::from(p)
                .and(m)
                .and(v)
                .and(g)
                .for_each(|p, m, v, &g| {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    let mhat = *m / bc1;
                    let vhat = *v / bc2;
                    *p -= lr32 * (mhat / (vhat.sqrt() + eps) + wd * *p);
                });
        }
    }
}

/// Scales gradients in place so the global norm does not exceed `max_norm`.
pub fn clip_global_norm(grads: &mut GradStore<f32>, max_norm: f64) -> f64 {
    let norm = grads.global_norm() as f64;
    if norm > max_norm && norm > 0.0 {
        grads.scale((max_norm / norm) as f32);
    }
    norm
}
