//! TOML run configuration with `[scenario]`, `[dataset]`, `[model]`,
//! `[train]` and `[eval]` tables. Missing tables take their defaults.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::baseline::Interpolation;
use crate::error::{Error, Result};
use crate::eval::{default_slices, SliceSpec};
use crate::model::NetConfig;
use crate::sim::{DatasetSpec, Scenario};
use crate::trainer::{ReconstructOptions, TrainConfig};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Empty means one midpoint slice per axis.
    pub slices: Vec<SliceSpec>,
    pub interpolation: Interpolation,
}

impl EvalConfig {
    pub fn slices_for(&self, n: usize) -> Vec<SliceSpec> {
        if self.slices.is_empty() {
            default_slices(n)
        } else {
            self.slices.clone()
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub scenario: Scenario,
    pub dataset: DatasetSpec,
    pub model: NetConfig,
    pub train: TrainConfig,
    pub reconstruct: ReconstructOptions,
    pub eval: EvalConfig,
}

impl RunConfig {
    /// `N = 16`, `α = 2`, 200 receivers, `C_h = 16`, 60 epochs of batch 8.
    pub fn desk() -> Self {
        Self {
            scenario: Scenario::desk(),
            dataset: DatasetSpec::new(200),
            model: NetConfig::with_hidden(16),
            train: TrainConfig::desk(),
            reconstruct: ReconstructOptions::default(),
            eval: EvalConfig::default(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Sets every seed in the configuration.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.scenario.rng_seed = seed;
        self.train.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.scenario.validate()?;
        self.dataset.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        for s in &self.eval.slices {
            if s.index >= self.scenario.grid_n {
                return Err(Error::Config(format!(
                    "slice {s} is outside a grid of {}",
                    self.scenario.grid_n
                )));
            }
        }
        Ok(())
    }
}
