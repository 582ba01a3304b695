//! Run configuration. Every key is optional and falls back to its default;
//! unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::maskhead::InjectionOrder;
use crate::objectives::{LossWeights, SasaConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Shared semantic / fusion width.
    pub d: usize,
    /// Distilled token width.
    pub d0: usize,
    /// Number of distilled tokens.
    pub num_tokens: usize,
    pub heads: usize,
    /// Sparse prompt tokens per stage.
    pub num_sparse: usize,
    /// Side of the dense prompt map.
    pub dense_size: usize,
    /// Hidden width of the prior decoder.
    pub prior_hidden: usize,
    /// Cached-memory amplification.
    pub beta: f64,
    pub injection_order: InjectionOrder,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d: 64,
            d0: 64,
            num_tokens: 4,
            heads: 4,
            num_sparse: 4,
            dense_size: 16,
            prior_hidden: 128,
            beta: 1.0,
            injection_order: InjectionOrder::CoarseFirst,
        }
    }
}

/// Component switches used by the ablation sweeps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Ablation {
    /// Prior decoder, KL loss and attention bias.
    pub use_prior: bool,
    /// Distilled tokens in every fusion stage, and the orthogonality loss.
    pub use_distiller: bool,
    pub use_sparse: bool,
    pub use_dense: bool,
    pub use_sasa: bool,
    pub use_orth: bool,
    pub use_cached_memory: bool,
    pub use_gram_schmidt: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Self {
            use_prior: true,
            use_distiller: true,
            use_sparse: true,
            use_dense: true,
            use_sasa: true,
            use_orth: true,
            use_cached_memory: true,
            use_gram_schmidt: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub lr: f64,
    pub warmup_fraction: f64,
    pub start_factor: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub epochs: usize,
    pub batch_size: usize,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 5e-5,
            warmup_fraction: 0.05,
            start_factor: 0.1,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            epochs: 5,
            batch_size: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Boundary matching tolerance in pixels.
    pub tolerance_px: usize,
    /// Split scored after every epoch; `none` disables it.
    pub val_split: String,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            tolerance_px: 1,
            val_split: "val".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Generated dataset directory.
    pub dataset: Option<PathBuf>,
    /// Pin the tensor backend to one thread so runs are bit-reproducible.
    pub deterministic: bool,
    pub model: ModelConfig,
    pub loss: LossWeights,
    pub sasa: SasaConfig,
    pub optim: OptimConfig,
    pub ablation: Ablation,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            dataset: None,
            deterministic: true,
            model: ModelConfig::default(),
            loss: LossWeights::default(),
            sasa: SasaConfig::default(),
            optim: OptimConfig::default(),
            ablation: Ablation::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.model;
        let k = m.num_tokens;
        if k < 2 || !k.is_power_of_two() {
            return Err(Error::Config(format!(
                "num_tokens must be a power of two >= 2, got {k}"
            )));
        }
        for (name, width) in [("d", m.d), ("d0", m.d0)] {
            if m.heads == 0 || width == 0 || width % m.heads != 0 {
                return Err(Error::Config(format!(
                    "{name} = {width} is not divisible by {} heads",
                    m.heads
                )));
            }
        }
        if m.num_sparse == 0 || m.dense_size == 0 || m.prior_hidden == 0 {
            return Err(Error::Config(
                "prompt and prior sizes must be positive".into(),
            ));
        }
        if !m.beta.is_finite() || m.beta < 0.0 {
            return Err(Error::Config(format!(
                "beta must be finite and >= 0, got {}",
                m.beta
            )));
        }
        self.loss.validate()?;
        if !(self.sasa.tau > 0.0) || self.sasa.grid == 0 {
            return Err(Error::Config("sasa tau and grid must be positive".into()));
        }
        let o = &self.optim;
        if !(o.lr > 0.0) || o.epochs == 0 {
            return Err(Error::Config("lr and epochs must be positive".into()));
        }
        if !(0.0..1.0).contains(&o.warmup_fraction) || !(0.0..=1.0).contains(&o.start_factor) {
            return Err(Error::Config(
                "warmup_fraction in [0,1) and start_factor in [0,1] required".into(),
            ));
        }
        if o.batch_size != 1 {
            return Err(Error::Config(format!(
                "only batch_size = 1 is supported, got {}",
                o.batch_size
            )));
        }
        if o.weight_decay < 0.0
            || !(0.0..1.0).contains(&o.beta1)
            || !(0.0..1.0).contains(&o.beta2)
            || !(o.eps > 0.0)
        {
            return Err(Error::Config("invalid optimizer constants".into()));
        }
        Ok(())
    }

    pub fn dataset_dir(&self) -> Result<&Path> {
        self.dataset
            .as_deref()
            .ok_or_else(|| Error::Config("no dataset directory configured".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_documented_values() {
        let c = RunConfig::default();
        assert_eq!(c.optim.lr, 5e-5);
        assert_eq!((c.loss.sasa, c.loss.kl, c.loss.orth), (5.0, 1.0, 1.0));
        assert_eq!((c.sasa.grid, c.sasa.k, c.sasa.tau), (64, 10, 0.07));
        assert_eq!(
            (c.model.num_tokens, c.model.num_sparse, c.model.dense_size),
            (4, 4, 16)
        );
        c.validate().unwrap();
    }

    #[test]
    fn toml_round_trip_and_partial_files() {
        let c = RunConfig::from_toml("seed = 3\n[ablation]\nuse_prior = false\n").unwrap();
        assert_eq!(c.seed, 3);
        assert!(!c.ablation.use_prior && c.ablation.use_distiller);
        let back = RunConfig::from_toml(&c.to_toml().unwrap()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn unknown_keys_and_bad_values_are_rejected() {
        assert!(RunConfig::from_toml("sed = 3").is_err());
        assert!(RunConfig::from_toml("[ablation]\nuse_prio = false").is_err());
        assert!(RunConfig::from_toml("[model]\nnum_tokens = 3").is_err());
        assert!(RunConfig::from_toml("[model]\nheads = 3").is_err());
        assert!(RunConfig::from_toml("[optim]\nbatch_size = 2").is_err());
        assert!(RunConfig::from_toml("[loss]\nkl = -1.0").is_err());
    }
}
