use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::loss::LossConfig;
use crate::model::NetworkConfig;
use crate::train::optimizer::AdamConfig;
use crate::train::stop::StopConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub optimizer: AdamConfig,
    pub stop: StopConfig,
    /// Hard cap on epochs per fold.
    pub max_epochs: usize,
    /// Draw one of the eight dihedral ops per sample and step.
    pub augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            optimizer: AdamConfig::default(),
            stop: StopConfig::default(),
            max_epochs: 1000,
            augment: true,
        }
    }
}

/// Everything a training or cross-validation run depends on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub network: NetworkConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub seed: u64,
    pub folds: usize,
    /// Consecutive rejected swaps before the fold splitter gives up.
    pub split_stale_iters: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            network: NetworkConfig::default(),
            loss: LossConfig::default(),
            train: TrainConfig::default(),
            seed: 0,
            folds: 5,
            split_stale_iters: 10_000,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        for r in [
            self.network.validate(),
            self.loss.validate(),
            self.train.optimizer.validate(),
            self.train.stop.validate(),
        ] {
            match r {
                Err(Error::InvalidConfig(v)) => bad.extend(v),
                Err(e) => bad.push(e.to_string()),
                Ok(()) => {}
            }
        }
        if self.folds < 2 {
            bad.push(format!("folds {} < 2", self.folds));
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidConfig(bad))
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_json(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn hash(&self) -> String {
        config_hash(self)
    }
}

/// Hex SHA-256 of the canonical JSON encoding of any config value.
pub fn config_hash(value: &impl Serialize) -> String {
    let bytes = serde_json::to_vec(value).expect("config serializes");
    Sha256::digest(&bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}
