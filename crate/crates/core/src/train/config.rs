use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::losses::LossWeights;
use crate::cut_loss::HeadReduction;
use crate::error::{Error, Result};
use crate::token_idle::{KeepSchedule, DEFAULT_NUM_STAGES};
use crate::vit::ViTConfig;

fn default_stages() -> usize {
    DEFAULT_NUM_STAGES
}

fn default_momentum() -> f64 {
    0.9
}

/// Everything a finetuning run needs. Serialized as JSON.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub vit: ViTConfig,
    pub keep_ratio: f64,
    #[serde(default = "default_stages")]
    pub num_stages: usize,
    #[serde(default)]
    pub weights: LossWeights,
    #[serde(default)]
    pub head_reduction: HeadReduction,
    pub learning_rate: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Synthetic training samples generated from `seed` when `data_dir` is unset.
    pub train_samples: usize,
    #[serde(default)]
    pub data_dir: Option<PathBuf>,
    /// Frozen full-size teacher. Falls back to `init_checkpoint` when unset.
    #[serde(default)]
    pub teacher_checkpoint: Option<PathBuf>,
    /// Starting weights of the student; random init from `seed` when unset.
    #[serde(default)]
    pub init_checkpoint: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            vit: ViTConfig::toy(),
            keep_ratio: 0.7,
            num_stages: DEFAULT_NUM_STAGES,
            weights: LossWeights::default(),
            head_reduction: HeadReduction::Mean,
            learning_rate: 1e-3,
            momentum: 0.9,
            epochs: 30,
            batch_size: 32,
            seed: 0,
            train_samples: 512,
            data_dir: None,
            teacher_checkpoint: None,
            init_checkpoint: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.vit.validate()?;
        self.weights.validate()?;
        self.schedule()?;
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::contract("learning rate must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::contract("momentum must lie in [0, 1)"));
        }
        if self.batch_size == 0 || self.train_samples == 0 && self.data_dir.is_none() {
            return Err(Error::contract("batch size and sample count must be positive"));
        }
        Ok(())
    }

    pub fn schedule(&self) -> Result<KeepSchedule> {
        KeepSchedule::new(self.keep_ratio, self.vit.num_layers, self.num_stages)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let tc: TrainConfig = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        tc.validate()?;
        Ok(tc)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::json(path, e))?;
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips_through_json() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("train.json");
        let tc = TrainConfig::default();
        tc.save(&path).unwrap();
        assert_eq!(TrainConfig::load(&path).unwrap(), tc);
    }

    #[test]
    fn invalid_values_are_rejected() {
        let tc = TrainConfig { learning_rate: 0.0, ..TrainConfig::default() };
        assert!(tc.validate().is_err());
        let tc = TrainConfig { keep_ratio: 1.5, ..TrainConfig::default() };
        assert!(tc.validate().is_err());
        let mut tc = TrainConfig::default();
        tc.weights.theta = -1.0;
        assert!(tc.validate().is_err());
    }
}
