use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::{AugmentConfig, SampleConfig};
use crate::error::{config_err, Error, Result};
use crate::losses::LossWeights;
use crate::model::ModelConfig;

/// Schema version of configuration files and checkpoint manifests.
pub const SPEC_VERSION: &str = "1";
/// Environment variable overriding the configured seed.
pub const SEED_ENV: &str = "SEQMASKS_SEED";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Regime {
    #[default]
    End2end,
    Finetune,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataFormat {
    /// Normalized Mask-MARS layout with a manifest.
    #[default]
    Mars,
    /// CASIA-B silhouette tree.
    Casia,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub root: PathBuf,
    pub format: DataFormat,
    /// Optional RGB tree mirroring a CASIA-B silhouette tree.
    pub frames_root: Option<PathBuf>,
    pub min_frames: usize,
    pub min_fg_ratio: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            root: PathBuf::from("data"),
            format: DataFormat::Mars,
            frames_root: None,
            min_frames: 8,
            min_fg_ratio: 0.15,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    /// Learning rate of every group except a pretrained backbone.
    pub lr: f64,
    /// Learning rate of a backbone loaded from pretrained weights.
    pub lr_backbone: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Fractions of the epoch count at which the rate is multiplied by `gamma`.
    pub milestones: Vec<f64>,
    pub gamma: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            lr_backbone: 3e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            milestones: vec![0.6, 0.8],
            gamma: 0.1,
        }
    }
}

impl OptimizerConfig {
    /// Multiplier for `epoch` (0-based) of `epochs`.
    pub fn lr_scale(&self, epoch: usize, epochs: usize) -> f64 {
        let passed = self
            .milestones
            .iter()
            .filter(|&&m| epoch >= (m * epochs as f64).floor() as usize)
            .count();
        self.gamma.powi(passed as i32)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExtractConfig {
    /// Frames per backbone chunk during whole-sequence inference.
    pub chunk: usize,
    /// Silhouettes per gait set, evenly spaced over long sequences.
    pub max_silhouettes: usize,
}

impl Default for ExtractConfig {
    fn default() -> Self {
        Self {
            chunk: 32,
            max_silhouettes: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetuneConfig {
    /// Checkpoint holding the backbone and appearance bottlenecks.
    pub appearance: PathBuf,
    /// Checkpoint holding the gait groups.
    pub gait: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub spec_version: String,
    #[serde(default)]
    pub regime: Regime,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "one")]
    pub epochs: usize,
    /// Defaults to the number of training sequences over the batch size.
    #[serde(default)]
    pub steps_per_epoch: Option<usize>,
    /// Single-threaded loading with fixed seeds (the only loading mode implemented).
    #[serde(default = "yes")]
    pub deterministic: bool,
    #[serde(default = "ten")]
    pub log_every: usize,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub batch: SampleConfig,
    #[serde(default)]
    pub augment: AugmentConfig,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub loss: LossWeights,
    #[serde(default)]
    pub extract: ExtractConfig,
    #[serde(default)]
    pub finetune: Option<FinetuneConfig>,
    /// Directory for the training log and checkpoints.
    #[serde(default = "default_out")]
    pub output: PathBuf,
}

fn one() -> usize {
    1
}
fn ten() -> usize {
    10
}
fn yes() -> bool {
    true
}
fn default_out() -> PathBuf {
    PathBuf::from("runs/default")
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            spec_version: SPEC_VERSION.into(),
            regime: Regime::End2end,
            seed: 0,
            epochs: 1,
            steps_per_epoch: None,
            deterministic: true,
            log_every: 10,
            data: DataConfig::default(),
            model: ModelConfig::default(),
            batch: SampleConfig::default(),
            augment: AugmentConfig::default(),
            optimizer: OptimizerConfig::default(),
            loss: LossWeights::default(),
            extract: ExtractConfig::default(),
            finetune: None,
            output: default_out(),
        }
    }
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Applies the seed environment override, if set.
    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.seed = v
                .trim()
                .parse()
                .map_err(|_| config_err!("{SEED_ENV} must be an unsigned integer, got `{v}`"))?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.spec_version != SPEC_VERSION {
            return Err(config_err!(
                "spec_version `{}` is not supported (expected `{SPEC_VERSION}`)",
                self.spec_version
            ));
        }
        self.model.validate()?;
        self.batch.validate()?;
        self.augment.validate()?;
        self.loss.validate()?;
        if self.batch.p < 2 {
            return Err(config_err!("P must be ≥ 2 for triplet mining, got {}", self.batch.p));
        }
        if self.batch.p * self.batch.kseq < 4 {
            return Err(config_err!("P·Kseq must be ≥ 4, got {}", self.batch.p * self.batch.kseq));
        }
        if self.epochs == 0 || self.steps_per_epoch == Some(0) {
            return Err(config_err!("epochs and steps_per_epoch must be positive"));
        }
        if self.extract.chunk == 0 || self.extract.max_silhouettes == 0 {
            return Err(config_err!("extract.chunk and extract.max_silhouettes must be positive"));
        }
        if self.regime == Regime::Finetune && self.finetune.is_none() {
            return Err(config_err!(
                "regime = \"finetune\" requires [finetune] appearance and gait checkpoints"
            ));
        }
        if !(self.data.min_fg_ratio > 0.0 && self.data.min_fg_ratio < 1.0) {
            return Err(config_err!("data.min_fg_ratio must be in (0, 1), got {}", self.data.min_fg_ratio));
        }
        let o = &self.optimizer;
        if !(o.lr > 0.0 && o.lr_backbone > 0.0 && o.gamma > 0.0) {
            return Err(config_err!("learning rates and gamma must be positive"));
        }
        Ok(())
    }
}

/// Hash of the model configuration and schema version; the training regime is excluded.
pub fn config_hash(model: &ModelConfig) -> String {
    let mut h = Sha256::new();
    h.update(SPEC_VERSION.as_bytes());
    h.update(serde_json::to_vec(model).expect("model config serializes"));
    hex::encode(h.finalize())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_parses_with_defaults() {
        let cfg = TrainConfig::from_toml("spec_version = \"1\"\n[batch]\np = 2\nkseq = 2\n").unwrap();
        assert_eq!(cfg.model.bottleneck_hidden, 256);
        assert_eq!(cfg.loss.margin_hard, 0.3);
        assert_eq!(cfg.optimizer.lr, 3e-4);
        let round = TrainConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(round, cfg);
    }

    #[test]
    fn unknown_keys_and_bad_versions_rejected() {
        assert!(matches!(
            TrainConfig::from_toml("spec_version = \"1\"\nbogus = 3\n"),
            Err(Error::Config(_))
        ));
        assert!(TrainConfig::from_toml("spec_version = \"1\"\n[model]\nwidth = 3\n").is_err());
        assert!(TrainConfig::from_toml("spec_version = \"0\"\n").is_err());
        assert!(TrainConfig::from_toml("spec_version = \"1\"\nregime = \"finetune\"\n").is_err());
        assert!(TrainConfig::from_toml("spec_version = \"1\"\n[batch]\np = 1\n").is_err());
    }

    #[test]
    fn missing_file_names_path() {
        let err = TrainConfig::load(Path::new("/nonexistent/cfg.toml")).unwrap_err();
        assert!(err.to_string().contains("/nonexistent/cfg.toml"));
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn step_schedule() {
        let o = OptimizerConfig::default();
        assert_eq!(o.lr_scale(0, 10), 1.0);
        assert_eq!(o.lr_scale(5, 10), 1.0);
        assert!((o.lr_scale(6, 10) - 0.1).abs() < 1e-15);
        assert!((o.lr_scale(8, 10) - 0.01).abs() < 1e-15);
    }

    #[test]
    fn hash_ignores_regime_but_not_model() {
        let a = TrainConfig::default();
        let mut b = a.clone();
        b.regime = Regime::Finetune;
        assert_eq!(config_hash(&a.model), config_hash(&b.model));
        b.model.bottleneck_hidden = 128;
        assert_ne!(config_hash(&a.model), config_hash(&b.model));
    }
}
