//! Optimisation: loss and target assignment, SGD with momentum, the cosine
//! schedule, the training loop, checkpoints and comparison renders.

pub mod checkpoint;
pub mod loss;
pub mod render;
pub mod runner;

use serde::{Deserialize, Serialize};

use crate::blocks::{ParamId, ParamStore};
use crate::error::{config_err, Result};
use crate::tensor::Tensor;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta};
pub use loss::{assign_targets, assign_and_loss, Assignment, LossConfig, LossOutput, Target};
pub use render::{render_comparison, RenderStats};
pub use runner::{detect_batch, evaluate_model, loss_and_grads, run_training, EpochLog, EvalSettings, TrainOutcome};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr0: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub image_size: usize,
    /// Final learning rate as a fraction of `lr0`.
    pub lr_final_fraction: f64,
    pub seed: u64,
    pub nesterov: bool,
    /// Linear warmup length in epochs; 0 disables it.
    pub warmup_epochs: usize,
    pub weight_decay: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr0: 0.01,
            momentum: 0.937,
            epochs: 30,
            batch_size: 8,
            image_size: 128,
            lr_final_fraction: 0.01,
            seed: 0,
            nesterov: false,
            warmup_epochs: 0,
            weight_decay: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return Err(config_err(format!("lr0 must be positive, got {}", self.lr0)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(config_err(format!("momentum must be in [0, 1), got {}", self.momentum)));
        }
        if self.batch_size == 0 {
            return Err(config_err("batch_size must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.lr_final_fraction) {
            return Err(config_err("lr_final_fraction must be in [0, 1]"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(config_err("weight_decay must be non-negative"));
        }
        if self.image_size == 0 || self.image_size % 32 != 0 {
            return Err(config_err(format!(
                "image_size must be a positive multiple of 32, got {}",
                self.image_size
            )));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let c: TrainConfig = serde_json::from_str(text).map_err(|e| config_err(format!("train config: {e}")))?;
        c.validate()?;
        Ok(c)
    }

    pub fn lr_final(&self) -> f64 {
        self.lr0 * self.lr_final_fraction
    }
}

/// `lr_f + ½(lr0 − lr_f)(1 + cos(π·step/total))`; steps past the end give
/// `lr_f`.
pub fn cosine_lr(step: usize, total_steps: usize, cfg: &TrainConfig) -> f64 {
    let lr_f = cfg.lr_final();
    if step >= total_steps {
        return lr_f;
    }
    let t = step as f64 / total_steps.max(1) as f64;
    lr_f + 0.5 * (cfg.lr0 - lr_f) * (1.0 + (std::f64::consts::PI * t).cos())
}

/// Cosine schedule with the optional linear warmup applied on top.
pub fn scheduled_lr(step: usize, total_steps: usize, warmup_steps: usize, cfg: &TrainConfig) -> f64 {
    let lr = cosine_lr(step, total_steps, cfg);
    if step < warmup_steps {
        lr * (step + 1) as f64 / warmup_steps as f64
    } else {
        lr
    }
}

/// One momentum step on a flat parameter: `v ← μ·v + g`, then
/// `p ← p − lr·v` (or `p ← p − lr·(g + μ·v)` with Nesterov). Returns false
/// and leaves everything untouched when any gradient entry is non-finite.
pub fn sgd_step(params: &mut [f64], grads: &[f64], velocity: &mut [f64], lr: f64, momentum: f64, nesterov: bool) -> bool {
    assert_eq!(params.len(), grads.len());
    assert_eq!(params.len(), velocity.len());
    if grads.iter().any(|g| !g.is_finite()) {
        return false;
    }
    for ((p, &g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        *v = momentum * *v + g;
        *p -= lr * if nesterov { g + momentum * *v } else { *v };
    }
    true
}

/// Momentum buffers for every learnable parameter of a store.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub momentum: f64,
    pub nesterov: bool,
    pub weight_decay: f64,
    velocity: Vec<Option<Vec<f64>>>,
}

impl Sgd {
    pub fn new(cfg: &TrainConfig) -> Self {
        Self {
            momentum: cfg.momentum,
            nesterov: cfg.nesterov,
            weight_decay: cfg.weight_decay,
            velocity: Vec::new(),
        }
    }

    /// Applies `grads` at `lr`; returns the names of parameters whose
    /// update was skipped for a non-finite gradient.
    pub fn step(&mut self, store: &mut ParamStore, grads: Vec<(ParamId, Tensor)>, lr: f64) -> Vec<String> {
        if self.velocity.len() < store.len() {
            self.velocity.resize(store.len(), None);
        }
        let mut skipped = Vec::new();
        for (id, g) in grads {
            let mut g = g.into_data();
            if self.weight_decay > 0.0 {
                for (gi, p) in g.iter_mut().zip(store.get(id).data()) {
                    *gi += self.weight_decay * p;
                }
            }
            let v = self.velocity[id.0].get_or_insert_with(|| vec![0.0; g.len()]);
            let p = store.get_mut(id).data_mut();
            if !sgd_step(p, &g, v, lr, self.momentum, self.nesterov) {
                let name = store.entry(id).name.clone();
                log::warn!("non-finite gradient for `{name}`; update skipped");
                skipped.push(name);
            }
        }
        skipped
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_endpoints() {
        let c = TrainConfig::default();
        assert_eq!(cosine_lr(0, 100, &c), 0.01);
        assert!((cosine_lr(100, 100, &c) - 1e-4).abs() < 1e-12);
        assert!((cosine_lr(50, 100, &c) - 0.00505).abs() < 1e-12);
        assert_eq!(cosine_lr(150, 100, &c), c.lr_final());
    }

    #[test]
    fn warmup_ramps() {
        let c = TrainConfig::default();
        assert!((scheduled_lr(0, 100, 10, &c) - cosine_lr(0, 100, &c) / 10.0).abs() < 1e-15);
        assert_eq!(scheduled_lr(10, 100, 10, &c), cosine_lr(10, 100, &c));
    }

    #[test]
    fn vanilla_step() {
        let (mut p, mut v) = ([0.0], [0.0]);
        assert!(sgd_step(&mut p, &[1.0], &mut v, 0.1, 0.0, false));
        assert!((p[0] + 0.1).abs() < 1e-15);
    }

    #[test]
    fn non_finite_gradient_is_skipped() {
        let (mut p, mut v) = ([1.0, 2.0], [0.5, 0.5]);
        assert!(!sgd_step(&mut p, &[f64::NAN, 1.0], &mut v, 0.1, 0.9, false));
        assert_eq!((p, v), ([1.0, 2.0], [0.5, 0.5]));
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::from_json(r#"{"momentum": 1.0}"#).is_err());
        assert!(TrainConfig::from_json(r#"{"batch_size": 0}"#).is_err());
        assert!(TrainConfig::from_json(r#"{"lr": 0.1}"#).is_err());
        assert_eq!(TrainConfig::from_json("{}").unwrap(), TrainConfig::default());
    }
}
