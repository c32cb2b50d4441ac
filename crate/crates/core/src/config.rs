//! Experiment configuration read from TOML.
//!
//! ```toml
//! [train]
//! epochs = 30
//! alpha = 1.6
//! [train.model]
//! fusion = "attention"
//! [data]
//! sequences = 20
//! [eval]
//! n_candidates = 256
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::eval::EvalConfig;
use crate::synth::DataConfig;
use crate::train::TrainConfig;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub train: TrainConfig,
    pub data: DataConfig,
    pub eval: EvalConfig,
    /// Dataset seed; the run seed is used when absent.
    pub data_seed: Option<u64>,
}

impl ExperimentConfig {
    pub fn from_toml(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.data.validate()?;
        self.eval.validate()
    }

    /// Copy with every seed-dependent part set from `seed`.
    pub fn with_seed(&self, seed: u64) -> Self {
        let mut c = self.clone();
        c.train.seed = seed;
        c
    }

    pub fn dataset_seed(&self) -> u64 {
        self.data_seed.unwrap_or(self.train.seed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_gives_defaults() {
        assert_eq!(ExperimentConfig::from_toml("").unwrap(), ExperimentConfig::default());
    }

    #[test]
    fn keys_override_defaults() {
        let c = ExperimentConfig::from_toml(
            "data_seed = 4\n[train]\nepochs = 3\nm = 0.4\ndistance = \"unsquared\"\n[train.model]\nfusion = \"concat\"\n[data]\nconfusers = 2\n",
        )
        .unwrap();
        assert_eq!(c.train.epochs, 3);
        assert_eq!(c.train.m, 0.4);
        assert_eq!(c.train.distance, crate::Metric::Unsquared);
        assert_eq!(c.train.model.fusion, crate::fusion::FusionMode::Concat);
        assert_eq!(c.data.confusers, 2);
        assert_eq!(c.dataset_seed(), 4);
    }

    #[test]
    fn unknown_and_invalid_keys_are_rejected() {
        assert!(ExperimentConfig::from_toml("[train]\nepoch = 3\n").is_err());
        assert!(ExperimentConfig::from_toml("[train]\nalpha = 0.05\n").is_err());
        assert!(ExperimentConfig::from_toml("[train]\nepochs = 0\n").is_err());
    }
}
