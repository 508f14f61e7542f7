//! Experiment configuration loaded from a single TOML file.
//!
//! ```toml
//! seed = 0
//!
//! [suite]
//! n_tasks = 4
//! heterogeneity = 0.8
//!
//! [base]
//! hidden = 32
//! finetune_steps = 200
//!
//! [experiment]
//! regimes = ["task_level_det", "sample_specific_vi"]
//! seeds = [0, 1, 2]
//!
//! [train]
//! prior = "spike_slab"
//! gating = true
//! ```
//!
//! Every section is optional and missing keys take their defaults.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::{ExperimentConfig, Regime, SuiteSpec, TrainConfig};
use crate::task_vectors::PartitionScheme;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaseConfig {
    pub hidden: usize,
    pub finetune_steps: usize,
    pub finetune_lr: f64,
    pub partition: PartitionScheme,
}

impl Default for BaseConfig {
    fn default() -> Self {
        BaseConfig { hidden: 32, finetune_steps: 200, finetune_lr: 0.01, partition: PartitionScheme::PerTensor }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentGrid {
    pub regimes: Vec<String>,
    pub seeds: Vec<u64>,
    /// Also report the gate applied as a filter on task-level coefficients.
    pub gate_filter: bool,
}

impl Default for ExperimentGrid {
    fn default() -> Self {
        ExperimentGrid { regimes: Regime::ALL.iter().map(|r| r.to_string()).collect(), seeds: vec![0, 1, 2], gate_filter: true }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    /// Seed of the suite and the base model.
    pub seed: u64,
    pub suite: SuiteSpec,
    pub base: BaseConfig,
    pub experiment: ExperimentGrid,
    pub train: TrainConfig,
}

impl Config {
    pub fn from_toml(text: &str) -> Result<Config> {
        toml::from_str(text).map_err(|e| {
            let message = e.message().trim().to_string();
            let field = field_of(&message).unwrap_or("config").to_string();
            Error::config(field, message)
        })
    }

    pub fn load(path: &Path) -> Result<Config> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg = Config::from_toml(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.suite.validate()?;
        if self.base.hidden == 0 {
            return Err(Error::config("base.hidden", "must be positive"));
        }
        if !(self.base.finetune_lr > 0.0 && self.base.finetune_lr.is_finite()) {
            return Err(Error::config("base.finetune_lr", "must be positive"));
        }
        self.regimes()?;
        if self.experiment.seeds.is_empty() {
            return Err(Error::config("experiment.seeds", "at least one seed is required"));
        }
        self.train.validate()
    }

    pub fn regimes(&self) -> Result<Vec<Regime>> {
        if self.experiment.regimes.is_empty() {
            return Err(Error::config("experiment.regimes", "at least one regime is required"));
        }
        self.experiment
            .regimes
            .iter()
            .map(|s| s.parse().map_err(|_| Error::config("experiment.regimes", format!("unknown regime `{s}`"))))
            .collect()
    }

    /// Every (regime, seed) cell, regime-major.
    pub fn cells(&self) -> Result<Vec<ExperimentConfig>> {
        let regimes = self.regimes()?;
        Ok(regimes
            .iter()
            .flat_map(|&regime| {
                self.experiment.seeds.iter().map(move |&seed| ExperimentConfig { regime, seed, train: self.train.clone() })
            })
            .collect())
    }
}

// toml reports unknown keys as "unknown field `x`, expected ..."
fn field_of(message: &str) -> Option<&str> {
    let start = message.find('`')? + 1;
    let len = message[start..].find('`')?;
    Some(&message[start..start + len])
}
