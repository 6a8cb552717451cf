use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, TrainConfig};

/// Everything needed to reproduce one cross-validation sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: String,
    pub data_dir: PathBuf,
    pub out: PathBuf,
    pub seeds: Vec<u64>,
    pub folds: usize,
    /// Worker threads for `(seed, fold)` jobs; 0 uses one per core.
    pub workers: usize,
    /// Iterate pairs sampled for each trained operator's Lipschitz record.
    pub lipschitz_pairs: usize,
    /// Largest tolerated fraction of training batches whose forward solve
    /// diverged or hit the iteration cap.
    pub max_solver_failure_rate: f64,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            dataset: "MUTAG".into(),
            data_dir: PathBuf::from("data"),
            out: PathBuf::from("runs"),
            seeds: vec![42, 123, 456],
            folds: 10,
            workers: 0,
            lipschitz_pairs: 200,
            max_solver_failure_rate: 0.05,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        if self.folds < 2 {
            return Err(Error::Config(format!("folds must be at least 2, got {}", self.folds)));
        }
        if self.dataset.is_empty() {
            return Err(Error::Config("dataset name is empty".into()));
        }
        if !(0.0..=1.0).contains(&self.max_solver_failure_rate) {
            return Err(Error::Config("max_solver_failure_rate must lie in [0, 1]".into()));
        }
        self.model.validate()?;
        self.train.validate()
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("experiment config serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    /// `<out>/<dataset>/<pathway>`
    pub fn pathway_dir(&self) -> PathBuf {
        self.out.join(&self.dataset).join(self.model.pathway.as_str())
    }

    pub fn run_dir(&self, seed: u64, fold: usize) -> PathBuf {
        self.pathway_dir().join(format!("{seed}_{fold}"))
    }
}
