//! Run configuration: one JSON document with flag overrides on top.

use std::fs;
use std::path::{Path, PathBuf};

use ein_seld::metrics::MetricsConfig;
use ein_seld::model::ModelConfig;
use ein_seld::pit::DEFAULT_EAD_THRESHOLD;
use ein_seld::scene::DatasetConfig;
use ein_seld::train::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

pub const RESOLVED_CONFIG_FILE: &str = "config.json";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub data: Option<PathBuf>,
    pub output: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub predictions: Option<PathBuf>,
    pub references: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Seeds dataset generation and model initialization. The training
    /// shuffle uses `train.seed`; `--seed` sets both.
    pub seed: u64,
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub metrics: MetricsConfig,
    pub ead_threshold: f64,
    pub paths: Paths,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            dataset: DatasetConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            metrics: MetricsConfig::default(),
            ead_threshold: DEFAULT_EAD_THRESHOLD,
            paths: Paths::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|source| CliError::ConfigParse {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load_or_default(path: Option<&Path>) -> Result<Self> {
        path.map_or_else(|| Ok(Self::default()), Self::load)
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.train.seed = seed;
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        self.metrics.validate()?;
        if !(0.0..1.0).contains(&self.ead_threshold) {
            return Err(CliError::Config(format!("ead_threshold {} outside [0, 1)", self.ead_threshold)));
        }
        let s = &self.dataset.synth;
        if s.n_cla != self.model.n_cla || s.n_track != self.model.n_track {
            return Err(CliError::Config(format!(
                "dataset has {} classes / {} tracks but the model {} / {}",
                s.n_cla, s.n_track, self.model.n_cla, self.model.n_track
            )));
        }
        Ok(())
    }

    /// Writes the resolved configuration into `dir`.
    pub fn write_resolved(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join(RESOLVED_CONFIG_FILE);
        let text = serde_json::to_string_pretty(self).map_err(CliError::Json)?;
        fs::write(&path, text + "\n").map_err(|e| CliError::io(format!("writing {}", path.display()), e))?;
        Ok(path)
    }
}

/// Resolves a path flag: flag first, then the config value; relative paths
/// are taken under `root` when one is set.
pub fn resolve_path(flag: Option<&Path>, configured: Option<&Path>, root: Option<&Path>, what: &str) -> Result<PathBuf> {
    let p = flag
        .or(configured)
        .ok_or_else(|| CliError::Config(format!("no {what} path given")))?;
    Ok(match root {
        Some(r) if p.is_relative() => r.join(p),
        _ => p.to_path_buf(),
    })
}
