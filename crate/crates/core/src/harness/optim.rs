//! Decoupled-weight-decay Adam with linear warmup and cosine decay.

use std::collections::BTreeMap;

use candle_core::backprop::GradStore;
use candle_core::Tensor;

use super::config::OptimConfig;
use crate::error::Result;
use crate::nn::ParamStore;

/// Step size at `step` (0-based) of `total` steps.
pub fn lr_at(cfg: &OptimConfig, step: usize, total: usize) -> f64 {
    let total = total.max(1);
    let warmup = ((cfg.warmup_fraction * total as f64).ceil() as usize).min(total);
    if step < warmup {
        let frac = step as f64 / warmup as f64;
        return cfg.lr * (cfg.start_factor + (1.0 - cfg.start_factor) * frac);
    }
    let span = (total - warmup).max(1) as f64;
    let progress = ((step - warmup) as f64 / span).min(1.0);
    cfg.lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// First and second moment estimates per parameter block.
#[derive(Debug, Clone, Default)]
pub struct AdamW {
    pub step: u64,
    pub moments: BTreeMap<String, (Tensor, Tensor)>,
}

impl AdamW {
    pub fn new() -> Self {
        Self::default()
    }

    /// One update of every block that received a gradient.
    pub fn update(
        &mut self,
        cfg: &OptimConfig,
        ps: &ParamStore,
        grads: &GradStore,
        lr: f64,
    ) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - cfg.beta1.powi(t);
        let c2 = 1.0 - cfg.beta2.powi(t);
        for (name, var) in ps.vars() {
            let Some(g) = grads.get(var.as_tensor()) else {
                continue;
            };
            let g = g.detach();
            let (m, v) = match self.moments.get(name) {
                Some((m, v)) => (m.clone(), v.clone()),
                None => (g.zeros_like()?, g.zeros_like()?),
            };
            let m = ((m * cfg.beta1)? + (&g * (1.0 - cfg.beta1))?)?;
            let v = ((v * cfg.beta2)? + (g.sqr()? * (1.0 - cfg.beta2))?)?;
            let step = ((&m / c1)? / ((&v / c2)?.sqrt()? + cfg.eps)?)?;
            let theta = var.as_tensor().detach();
            let next = ((&theta * (1.0 - lr * cfg.weight_decay))? - (step * lr)?)?;
            var.set(&next)?;
            self.moments.insert(name.clone(), (m, v));
        }
        Ok(())
    }
}
