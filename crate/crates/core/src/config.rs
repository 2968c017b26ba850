//! Declarative run configuration: one TOML document drives every pipeline
//! stage. Any omitted field takes its documented default and the fully
//! resolved document is persisted next to emitted artifacts.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::canlog::{default_normal_ids, AttackKind, NormalId, SyntheticConfig};
use crate::engine::{PipelineOptions, ReplayMode, ReplayOptions};
use crate::nn::{EarlyStopConfig, ModelSpec, TrainConfig};
use crate::window::WindowConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot parse config {path}: {source}")]
    Parse {
        path: PathBuf,
        #[source]
        source: toml::de::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    /// Chronological train/validation/test ratios over windows.
    pub split: [f64; 3],
    pub synthetic: SyntheticSection,
    pub window: WindowSection,
    pub model: ModelSection,
    pub train: TrainSection,
    pub quant: QuantSection,
    pub replay: ReplaySection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            out_dir: PathBuf::from("runs"),
            split: [0.80, 0.15, 0.05],
            synthetic: SyntheticSection::default(),
            window: WindowSection::default(),
            model: ModelSection::default(),
            train: TrainSection::default(),
            quant: QuantSection::default(),
            replay: ReplaySection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSection {
    pub attack: AttackKind,
    pub duration: f64,
    pub attack_fraction: f64,
    pub attack_rate: Option<f64>,
    /// Periodic id set; defaults to the built-in passenger-car-like set.
    pub normal_ids: Option<Vec<NormalId>>,
}

impl Default for SyntheticSection {
    fn default() -> Self {
        Self {
            attack: AttackKind::DoS,
            duration: 60.0,
            attack_fraction: 0.25,
            attack_rate: None,
            normal_ids: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WindowSection {
    pub depth: usize,
}

impl Default for WindowSection {
    fn default() -> Self {
        Self { depth: 4 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub layer_units: Vec<usize>,
    pub dropout: f64,
    pub batchnorm: bool,
    pub bn_epsilon: f64,
    pub bn_momentum: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        let spec = ModelSpec::default();
        Self {
            layer_units: spec.layer_units,
            dropout: spec.dropout_rate as f64,
            batchnorm: spec.batchnorm,
            bn_epsilon: spec.bn_epsilon as f64,
            bn_momentum: spec.bn_momentum as f64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_epsilon: f64,
    pub checkpoint_every_epoch: bool,
    pub early_stop: bool,
    pub early_stop_drop: f64,
    pub early_stop_patience: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        let cfg = TrainConfig::default();
        let es = EarlyStopConfig::default();
        Self {
            learning_rate: cfg.learning_rate,
            epochs: cfg.epochs,
            batch_size: cfg.batch_size,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            adam_epsilon: cfg.adam_epsilon,
            checkpoint_every_epoch: cfg.checkpoint_every_epoch,
            early_stop: true,
            early_stop_drop: es.accuracy_drop,
            early_stop_patience: es.patience,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QuantSection {
    pub calibration_size: usize,
    pub qat_epochs: usize,
    pub qat_learning_rate: f64,
}

impl Default for QuantSection {
    fn default() -> Self {
        Self {
            calibration_size: crate::quant::DEFAULT_CALIBRATION_SIZE,
            qat_epochs: 2,
            qat_learning_rate: 1e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReplaySection {
    pub mode: ReplayMode,
    pub queue_depth: usize,
    pub threshold: f64,
}

impl Default for ReplaySection {
    fn default() -> Self {
        Self { mode: ReplayMode::MaxRate, queue_depth: 64, threshold: 0.5 }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path)
            .map_err(|source| ConfigError::Io { path: path.to_path_buf(), source })?;
        toml::from_str(&text)
            .map_err(|source| ConfigError::Parse { path: path.to_path_buf(), source })
    }

    /// Fully resolved document, defaults included.
    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn synthetic_config(&self) -> SyntheticConfig {
        SyntheticConfig {
            normal_ids: self
                .synthetic
                .normal_ids
                .clone()
                .unwrap_or_else(default_normal_ids),
            attack: self.synthetic.attack,
            attack_rate: self.synthetic.attack_rate,
            duration: self.synthetic.duration,
            attack_fraction_target: self.synthetic.attack_fraction,
            seed: self.seed,
        }
    }

    pub fn window_config(&self) -> WindowConfig {
        WindowConfig { depth: self.window.depth }
    }

    pub fn model_spec(&self) -> ModelSpec {
        ModelSpec {
            layer_units: self.model.layer_units.clone(),
            dropout_rate: self.model.dropout as f32,
            batchnorm: self.model.batchnorm,
            bn_epsilon: self.model.bn_epsilon as f32,
            bn_momentum: self.model.bn_momentum as f32,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            learning_rate: self.train.learning_rate,
            epochs: self.train.epochs,
            batch_size: self.train.batch_size,
            beta1: self.train.beta1,
            beta2: self.train.beta2,
            adam_epsilon: self.train.adam_epsilon,
            checkpoint_every_epoch: self.train.checkpoint_every_epoch,
            early_stop: self.train.early_stop.then(|| EarlyStopConfig {
                accuracy_drop: self.train.early_stop_drop,
                patience: self.train.early_stop_patience,
            }),
            seed: self.seed,
        }
    }

    pub fn qat_train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.quant.qat_epochs,
            learning_rate: self.quant.qat_learning_rate,
            ..self.train_config()
        }
    }

    pub fn replay_options(&self) -> ReplayOptions {
        ReplayOptions {
            window: self.window_config(),
            pipeline: PipelineOptions {
                queue_depth: self.replay.queue_depth,
                threshold: self.replay.threshold,
                delay: None,
            },
        }
    }

    pub fn split_ratios(&self) -> (f64, f64, f64) {
        (self.split[0], self.split[1], self.split[2])
    }
}
