//! The single JSON run configuration.
//!
//! Every section and key has a default, so `{}` is a valid config; unknown
//! keys are rejected at every level.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::BackboneConfig;
use crate::diffusion::EdmConstants;
use crate::error::{Error, Result};
use crate::objective::DsmMode;
use crate::sampler::SamplerConfig;
use crate::trainer::dataset::DatasetSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TuneSchedule {
    /// `r = 0` for every tuning step.
    #[default]
    Zero,
    /// `r = 0.5 cos^4(pi/2 * i / n_tot)`.
    Cosine,
}

impl std::str::FromStr for TuneSchedule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "zero" => Ok(Self::Zero),
            "cosine" => Ok(Self::Cosine),
            other => Err(Error::Config(format!("unknown schedule {other:?} (expected zero or cosine)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub seed: u64,
    pub mask_ratio: f64,
    /// Weight of the reconstruction term.
    pub lambda: f64,
    pub p_uncond: f64,
    pub dsm_mode: DsmMode,
    /// Multiply the reconstruction term by the EDM loss weight as well.
    pub mae_weighted: bool,
    pub lr: f64,
    pub tune_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub tune_batch_size: usize,
    pub steps: u64,
    pub tune_steps: u64,
    pub tune_schedule: TuneSchedule,
    pub ema_decay: f64,
    pub ema_warmup: bool,
    pub checkpoint_every: u64,
    pub record_wallclock: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            mask_ratio: 0.5,
            lambda: 0.1,
            p_uncond: 0.1,
            dsm_mode: DsmMode::UnmaskedOnly,
            mae_weighted: false,
            lr: 1e-4,
            tune_lr: 5e-5,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            weight_decay: 0.0,
            batch_size: 64,
            tune_batch_size: 64,
            steps: 3000,
            tune_steps: 500,
            tune_schedule: TuneSchedule::Zero,
            ema_decay: 0.9999,
            ema_warmup: true,
            checkpoint_every: 500,
            record_wallclock: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub backbone: BackboneConfig,
    pub sampler: SamplerConfig,
    pub dataset: DatasetSpec,
    pub edm: EdmConstants,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Hex SHA-256 of the compact JSON form.
    pub fn hash(&self) -> String {
        let compact = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&compact).iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.sampler.validate()?;
        self.dataset.validate()?;
        self.edm.validate()?;
        let b = &self.backbone;
        let d = &self.dataset;
        if (b.input_size, b.in_channels, b.num_classes) != (d.image_size, d.channels, d.num_classes) {
            return Err(Error::Config(format!(
                "backbone expects {}x{} images with {} channels and {} classes, dataset provides {}x{} / {} / {}",
                b.input_size, b.input_size, b.in_channels, b.num_classes, d.image_size, d.image_size, d.channels, d.num_classes
            )));
        }
        let t = &self.train;
        crate::patch::check_ratio(t.mask_ratio)?;
        if crate::patch::masked_count(b.num_tokens(), t.mask_ratio) >= b.num_tokens() {
            return Err(Error::Config("mask ratio leaves no visible tokens".into()));
        }
        if !(t.lambda >= 0.0) {
            return Err(Error::Config(format!("lambda must be >= 0, got {}", t.lambda)));
        }
        if !(0.0..=1.0).contains(&t.p_uncond) {
            return Err(Error::Config(format!("p_uncond must be in [0, 1], got {}", t.p_uncond)));
        }
        if !(t.lr > 0.0 && t.tune_lr > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if !(0.0..1.0).contains(&t.beta1) || !(0.0..1.0).contains(&t.beta2) || !(t.adam_eps > 0.0) || !(t.weight_decay >= 0.0) {
            return Err(Error::Config("invalid optimizer hyperparameters".into()));
        }
        if t.batch_size == 0 || t.tune_batch_size == 0 {
            return Err(Error::Config("batch sizes must be positive".into()));
        }
        if !(0.0..1.0).contains(&t.ema_decay) {
            return Err(Error::Config(format!("ema_decay must be in [0, 1), got {}", t.ema_decay)));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_gives_defaults() {
        let cfg = RunConfig::from_json("{}").unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.train.mask_ratio, 0.5);
        assert_eq!(cfg.train.lambda, 0.1);
        assert_eq!(cfg.train.p_uncond, 0.1);
        assert_eq!(cfg.train.ema_decay, 0.9999);
        assert_eq!(cfg.train.tune_lr / cfg.train.lr, 0.5);
        assert_eq!(cfg.sampler.num_steps, 40);
        assert_eq!(cfg.sampler.rho, 7.0);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(RunConfig::from_json(r#"{"trian": {}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"train": {"mask_ration": 0.5}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"backbone": {"depth": 3}}"#).is_err());
    }

    #[test]
    fn round_trip_is_fixed_point() {
        let mut cfg = RunConfig::default();
        cfg.train.tune_schedule = TuneSchedule::Cosine;
        cfg.train.dsm_mode = DsmMode::Full;
        cfg.backbone.encoder_depth = 3;
        let text = cfg.to_json();
        let back = RunConfig::from_json(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.to_json(), text);
        assert_eq!(back.hash(), cfg.hash());
    }

    #[test]
    fn inconsistent_sections_rejected() {
        let mut cfg = RunConfig::default();
        cfg.dataset.image_size = 32;
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::default();
        cfg.train.mask_ratio = 1.0;
        assert!(cfg.validate().is_err());
    }
}
