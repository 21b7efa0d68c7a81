//! The run configuration consumed by the CLI: stage hyperparameters, network
//! architectures, data-pipeline knobs, seeds and paths. Defaults are the
//! reference training protocol, so an empty config file is a valid run.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::mix_seed;
use crate::error::{Result, SpineError};
use crate::net::CnnArch;
use crate::sequence::{BiRnnArch, RnnTrainConfig};
use crate::train::CnnTrainConfig;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Directory of training `.vvol` volumes (with `.ann.json` sidecars).
    pub train_dir: Option<PathBuf>,
    /// Resample inputs to `target_spacing_mm` before any other processing.
    pub resample: bool,
    pub target_spacing_mm: [f64; 3],
    pub positives_per_vertebra: usize,
    pub negatives_per_vertebra: usize,
    pub subimages_per_vertebra: usize,
    pub identification_threshold_mm: f64,
}

impl Default for DataConfig {
    fn default() -> DataConfig {
        DataConfig {
            train_dir: None,
            resample: true,
            target_spacing_mm: [1.25, 1.0, 1.0],
            positives_per_vertebra: 40,
            negatives_per_vertebra: 40,
            subimages_per_vertebra: 30,
            identification_threshold_mm: 20.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Master seed; per-stage seeds are derived from it unless set explicitly.
    pub seed: u64,
    pub threads: Option<usize>,
    pub data: DataConfig,
    pub cnn_arch: CnnArch,
    pub rnn_arch: BiRnnArch,
    pub cnn_train: CnnTrainConfig,
    pub rnn_train: RnnTrainConfig,
}

impl Default for RunConfig {
    fn default() -> RunConfig {
        RunConfig {
            seed: 42,
            threads: None,
            data: DataConfig::default(),
            cnn_arch: CnnArch::reference(),
            rnn_arch: BiRnnArch::reference(),
            cnn_train: CnnTrainConfig::default(),
            rnn_train: RnnTrainConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| SpineError::io(path, e))?;
        let cfg: RunConfig = serde_json::from_str(&text).map_err(|e| {
            SpineError::BadConfig(format!("{}: {e}", path.display()))
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.cnn_arch.validate()?;
        self.rnn_arch.validate()?;
        self.cnn_train.validate()?;
        self.rnn_train.validate()?;
        if self.rnn_arch.input_width != self.cnn_arch.fc_width {
            return Err(SpineError::BadConfig(format!(
                "rnn input width {} must equal the cnn feature width {}",
                self.rnn_arch.input_width, self.cnn_arch.fc_width
            )));
        }
        if self.data.target_spacing_mm.iter().any(|&v| v <= 0.0) {
            return Err(SpineError::BadConfig("target spacing must be positive".into()));
        }
        if self.data.identification_threshold_mm <= 0.0 {
            return Err(SpineError::BadConfig("identification threshold must be positive".into()));
        }
        if let Some(t) = self.threads {
            if t == 0 {
                return Err(SpineError::BadConfig("threads must be positive".into()));
            }
        }
        Ok(())
    }

    /// Per-stage seeds derived from the master seed. Explicit non-zero stage
    /// seeds win.
    pub fn cnn_seed(&self) -> u64 {
        if self.cnn_train.seed != 0 {
            self.cnn_train.seed
        } else {
            mix_seed(self.seed, 0x434e4e, 0)
        }
    }

    pub fn rnn_seed(&self) -> u64 {
        if self.rnn_train.seed != 0 {
            self.rnn_train.seed
        } else {
            mix_seed(self.seed, 0x524e4e, 0)
        }
    }

    pub fn sampling_seed(&self) -> u64 {
        mix_seed(self.seed, 0x444154, 0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_round_trips_unchanged() {
        let cfg = RunConfig::default();
        let json = cfg.to_json().unwrap();
        let back: RunConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(cfg, back);
        assert_eq!(json, back.to_json().unwrap());
    }

    #[test]
    fn defaults_mirror_the_reference_protocol() {
        let cfg = RunConfig::default();
        assert_eq!(cfg.cnn_train.epochs, 15);
        assert_eq!(cfg.cnn_train.batch_size, 24);
        assert_eq!(cfg.cnn_train.learning_rate, 0.001);
        assert_eq!(cfg.cnn_train.lr_decay_factor, 0.4);
        assert_eq!(cfg.cnn_train.lr_decay_every_iters, 20000);
        assert_eq!(cfg.cnn_train.weight_decay, 1e-4);
        assert_eq!(cfg.cnn_train.momentum, 0.9);
        assert_eq!(cfg.cnn_train.lambda, 0.12);
        assert_eq!(cfg.rnn_train.epochs, 12);
        assert_eq!(cfg.rnn_train.batch_size, 256);
        assert_eq!(cfg.rnn_train.learning_rate, 1e-6);
        assert_eq!(cfg.rnn_train.lambda, 0.10);
        assert_eq!(cfg.cnn_arch.sample_dims, [32, 112, 96]);
        assert_eq!(cfg.rnn_arch.hidden_units, 256);
        assert_eq!(cfg.rnn_arch.num_layers, 3);
        assert_eq!(cfg.data.target_spacing_mm, [1.25, 1.0, 1.0]);
        assert_eq!(cfg.data.positives_per_vertebra, 40);
        assert_eq!(cfg.data.subimages_per_vertebra, 30);
        cfg.validate().unwrap();
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let json = r#"{"seed": 1, "bogus_knob": 3}"#;
        assert!(serde_json::from_str::<RunConfig>(json).is_err());
    }

    #[test]
    fn contradictory_values_are_rejected() {
        let mut cfg = RunConfig::default();
        cfg.rnn_arch.input_width = 99;
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::default();
        cfg.cnn_arch.sample_dims = [30, 112, 96];
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::default();
        cfg.cnn_train.learning_rate = 0.0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn stage_seeds_are_derived_but_overridable() {
        let mut cfg = RunConfig::default();
        let derived = cfg.cnn_seed();
        assert_ne!(derived, 0);
        cfg.cnn_train.seed = 7;
        assert_eq!(cfg.cnn_seed(), 7);
        assert_ne!(cfg.rnn_seed(), cfg.sampling_seed());
    }
}
