//! Run configuration: one TOML document with `[model]`, `[loss]`,
//! `[augment]`, `[train]`, `[metrics]` and `[data]` tables. Missing keys take
//! their defaults.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::augment::AugmentationConfig;
use crate::dataset::Split;
use crate::losses::LossConfig;
use crate::metrics::MetricConfig;
use crate::model::ModelConfig;
use crate::trainer::TrainConfig;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot parse config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("cannot serialize config: {0}")]
    Serialize(#[from] toml::ser::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    /// `index.json` written by `prepare`.
    pub index: PathBuf,
    pub train_split: Split,
    pub val_split: Split,
    /// Use only the first `n` entries of a split.
    pub max_train: Option<usize>,
    pub max_val: Option<usize>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            index: PathBuf::from("prepared/index.json"),
            train_split: Split::Train,
            val_split: Split::Val,
            max_train: None,
            max_val: None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    /// Every artifact of the run is written below this directory.
    pub run_dir: PathBuf,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub augment: AugmentationConfig,
    pub train: TrainConfig,
    pub metrics: MetricConfig,
    pub data: DataConfig,
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        let config: RunConfig = toml::from_str(text)?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String, ConfigError> {
        Ok(toml::to_string_pretty(self)?)
    }

    /// Checks every section and their cross-constraints.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |section: &str, e: &dyn std::fmt::Display| ConfigError::Invalid(format!("[{section}] {e}"));
        self.model.validate().map_err(|e| invalid("model", &e))?;
        self.loss.validate().map_err(|e| invalid("loss", &e))?;
        self.augment.validate().map_err(|e| invalid("augment", &e))?;
        self.train.validate().map_err(|e| invalid("train", &e))?;
        let m = &self.metrics;
        if !(m.tau > 0.0 && m.tau < 1.0) {
            return Err(invalid("metrics", &format!("tau must lie in (0, 1), got {}", m.tau)));
        }
        if !(m.epsilon >= 0.0) || m.thresholds.is_empty() {
            return Err(invalid("metrics", &"epsilon must be >= 0 and thresholds non-empty"));
        }
        if self.augment.target_size != self.model.input_size {
            return Err(ConfigError::Invalid(format!(
                "augment.target_size {:?} must equal model.input_size {:?}",
                self.augment.target_size, self.model.input_size
            )));
        }
        if self.data.train_split == self.data.val_split {
            return Err(invalid("data", &"train_split and val_split must differ"));
        }
        Ok(())
    }

    /// `path` if absolute, else relative to `run_dir`.
    pub fn resolve(&self, path: &Path) -> PathBuf {
        if path.is_absolute() {
            path.to_path_buf()
        } else {
            self.run_dir.join(path)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Architecture;

    #[test]
    fn defaults_are_valid() {
        RunConfig::default().validate().unwrap();
    }

    #[test]
    fn partial_toml_fills_defaults() {
        let c = RunConfig::from_toml_str(
            r#"
            run_dir = "runs/a"
            [model]
            architecture = "deeplab_v3plus"
            [loss]
            w_bce = 0.25
            [train]
            batch_size = 2
            "#,
        )
        .unwrap();
        assert_eq!(c.model.architecture, Architecture::DeeplabV3plus);
        assert_eq!(c.model.aspp_rates, vec![6, 12, 18]);
        assert_eq!(c.loss.w_bce, 0.25);
        assert_eq!(c.loss.w_dice, 1.0);
        assert_eq!(c.train.batch_size, 2);
        assert_eq!(c.train.learning_rate, 1e-4);
        c.validate().unwrap();
    }

    #[test]
    fn negative_weight_rejected() {
        let c = RunConfig::from_toml_str("[loss]\nw_dice = -1.0\n").unwrap();
        let msg = c.validate().unwrap_err().to_string();
        assert!(msg.contains("[loss]") && msg.contains("w_dice"), "{msg}");
    }

    #[test]
    fn unknown_architecture_rejected_at_parse() {
        assert!(RunConfig::from_toml_str("[model]\narchitecture = \"vit\"\n").is_err());
    }

    #[test]
    fn size_mismatch_rejected() {
        let mut c = RunConfig::default();
        c.augment.target_size = [256, 256];
        assert!(c.validate().unwrap_err().to_string().contains("target_size"));
    }

    #[test]
    fn toml_roundtrip() {
        let mut c = RunConfig::default();
        c.model.encoder_weights = Some("weights/enc.mpk".into());
        c.data.max_train = Some(5);
        let text = c.to_toml_string().unwrap();
        assert_eq!(RunConfig::from_toml_str(&text).unwrap(), c);
    }
}
