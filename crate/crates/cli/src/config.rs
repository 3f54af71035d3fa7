use std::path::{Path, PathBuf};

use anomattr::attribution::AttributionConfig;
use anomattr::clv::TrainConfig;
use anomattr::eval::ClassifierConfig;
use anomattr::synth::SynthConfig;
use anomattr::threshold::ThresholdConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

/// Everything a pipeline run needs. Every field has a default and unknown
/// keys are rejected; command-line flags override values read from file.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    /// Input table; `pipeline` generates synthetic data when absent.
    pub input: Option<PathBuf>,
    /// Output directory for `pipeline`.
    pub out_dir: Option<PathBuf>,
    /// Expected feature columns; empty accepts the file's columns.
    pub features: Vec<String>,
    pub seed: u64,
    pub preprocess: PreprocessConfig,
    pub cluster: ClusterConfig,
    pub model: ModelConfig,
    pub threshold: ThresholdConfig,
    pub attribution: AttributionConfig,
    pub classifier: ClassifierConfig,
    pub synth: SynthConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PreprocessConfig {
    /// Temporal aggregation block in days; none keeps the input resolution.
    pub period_days: Option<usize>,
    pub drop_leap: bool,
    /// Calendar months to keep (1 = January); empty keeps all.
    pub months: Vec<u32>,
    /// Append `tw10` and `ssrdas` (needs u10, v10, ssrd, asn).
    pub derive: bool,
    pub iqr_clean: bool,
    pub window: usize,
    pub stride: usize,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            period_days: None,
            drop_leap: true,
            months: Vec::new(),
            derive: false,
            iqr_clean: false,
            window: 14,
            stride: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClusterConfig {
    /// Fixed cluster count; otherwise the elbow over `k_min..=k_max`.
    pub k: Option<usize>,
    pub k_min: usize,
    pub k_max: usize,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        Self {
            k: None,
            k_min: 1,
            k_max: 6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub encoder_width: usize,
    pub latent_dim: usize,
    pub epochs: usize,
    pub patience: usize,
    pub batch: usize,
    pub lr: f64,
    pub val_fraction: f64,
    /// One model for all grids instead of one per grid.
    pub pooled: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            encoder_width: 32,
            latent_dim: 8,
            epochs: t.epochs,
            patience: t.patience,
            batch: t.batch,
            lr: t.lr,
            val_fraction: t.val_fraction,
            pooled: false,
        }
    }
}

impl ModelConfig {
    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            patience: self.patience,
            batch: self.batch,
            lr: self.lr,
            val_fraction: self.val_fraction,
            seed,
        }
    }
}

impl PipelineConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path).map_err(|e| anomattr::Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_object_gives_defaults() {
        let c: PipelineConfig = serde_json::from_str("{}").unwrap();
        assert_eq!(c, PipelineConfig::default());
        assert_eq!(c.preprocess.window, 14);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(serde_json::from_str::<PipelineConfig>(r#"{"sede": 1}"#).is_err());
        assert!(serde_json::from_str::<PipelineConfig>(r#"{"model": {"width": 3}}"#).is_err());
        assert!(serde_json::from_str::<PipelineConfig>(r#"{"threshold": {"q": 3}}"#).is_err());
    }

    #[test]
    fn nested_values_are_read() {
        let c: PipelineConfig = serde_json::from_str(
            r#"{"seed": 9, "model": {"epochs": 3}, "attribution": {"direction": "negative-delta"}}"#,
        )
        .unwrap();
        assert_eq!(c.seed, 9);
        assert_eq!(c.model.epochs, 3);
        assert_eq!(c.model.latent_dim, 8);
        assert_eq!(c.model.train_config(9).seed, 9);
    }
}
