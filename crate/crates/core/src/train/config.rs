use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub momentum: f64,
    pub plateau_factor: f64,
    pub plateau_patience: usize,
    /// Minimum validation-loss decrease that counts as an improvement.
    pub plateau_threshold: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Audio frames per training sample; shorter utterances wrap around.
    pub crop_frames: usize,
    /// Fixed data-parallel split of every batch. Independent of thread count.
    pub shards: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.02,
            momentum: 0.0,
            plateau_factor: 0.95,
            plateau_patience: 2,
            plateau_threshold: 1e-5,
            batch_size: 32,
            max_epochs: 30,
            crop_frames: 100,
            shards: 1,
            seed: 7,
        }
    }
}

impl TrainConfig {
    /// Large-scale settings: lr 0.001, batch 128.
    pub fn mirror_paper() -> Self {
        TrainConfig {
            lr: 0.001,
            batch_size: 128,
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self, uses_batchnorm: bool) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("train.lr", "must be a positive number"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("train.momentum", "must lie in [0, 1)"));
        }
        if !(self.plateau_factor > 0.0 && self.plateau_factor < 1.0) {
            return Err(Error::config("train.plateau_factor", "must lie strictly between 0 and 1"));
        }
        if !(self.plateau_threshold >= 0.0) {
            return Err(Error::config("train.plateau_threshold", "must be nonnegative"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size", "must be positive"));
        }
        if self.crop_frames == 0 {
            return Err(Error::config("train.crop_frames", "must be positive"));
        }
        if self.shards == 0 || self.shards > self.batch_size {
            return Err(Error::config("train.shards", "must lie in [1, batch_size]"));
        }
        if uses_batchnorm && self.batch_size / self.shards < 2 {
            return Err(Error::config(
                "train.batch_size",
                format!(
                    "batchnorm needs at least 2 samples per shard ({} samples over {} shards)",
                    self.batch_size, self.shards
                ),
            ));
        }
        Ok(())
    }
}
