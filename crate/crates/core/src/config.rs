//! Run configuration: a TOML file with every section optional, merged with
//! command-line overrides by the caller.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adapter::AdapterConfig;
use crate::datagen::BenchmarkConfig;
use crate::error::{Error, Result};
use crate::pipeline::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Seed of the synthetic benchmark.
    pub data_seed: u64,
    pub benchmark: BenchmarkConfig,
    pub adapter: AdapterConfig,
    pub train: TrainConfig,
    pub ablation_seeds: Vec<u64>,
    pub shots_curve: Vec<usize>,
    /// Gradient check tolerance on the max relative error.
    pub gradcheck_tolerance: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data_seed: 0,
            benchmark: BenchmarkConfig::default(),
            adapter: AdapterConfig::default(),
            train: TrainConfig::default(),
            ablation_seeds: vec![0, 1, 2, 3, 4],
            shots_curve: vec![1, 2, 4, 8, 16],
            gradcheck_tolerance: 1e-4,
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::InvalidConfig(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.benchmark.validate()?;
        self.train.validate()?;
        if self.ablation_seeds.is_empty() {
            return Err(Error::InvalidConfig("ablation_seeds is empty".into()));
        }
        if !(self.gradcheck_tolerance > 0.0) {
            return Err(Error::InvalidConfig("gradcheck_tolerance must be positive".into()));
        }
        Ok(())
    }
}
