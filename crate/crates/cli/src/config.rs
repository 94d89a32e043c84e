//! Run configuration: one TOML file with `[run]`, `[sizes]`, `[ngm]`,
//! `[trainer]`, `[mask]` and `[toggles]` sections. Missing keys take the
//! shipped defaults; unknown keys are rejected by name.

use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use symreg_core::bench::{Benchmark, ExperimentConfig, Sizes};
use symreg_core::constraints::MaskConfig;
use symreg_core::gating::NgmHyper;
use symreg_core::rl::TrainerConfig;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("invalid config: {0}")]
    Parse(String),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    /// Benchmark for `gen-data`, `train-ngm` and `run`.
    pub benchmark: Benchmark,
    /// Benchmarks for `bench`.
    pub benchmarks: Vec<Benchmark>,
    pub noise_count: usize,
    /// Seed for single-run commands.
    pub seed: u64,
    /// Seeds for `bench`.
    pub seeds: Vec<u64>,
    pub output: PathBuf,
    /// Worker threads; 0 uses every core.
    pub jobs: usize,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            benchmark: Benchmark::ALL[0],
            benchmarks: Benchmark::ALL.to_vec(),
            noise_count: 0,
            seed: 0,
            seeds: (0..10).collect(),
            output: PathBuf::from("out"),
            jobs: 0,
        }
    }
}

/// Ablation switches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Toggles {
    pub use_ngm: bool,
    /// False zeroes the path-entropy coefficient.
    pub use_path_entropy: bool,
    /// False trains with one plain policy-gradient step per batch.
    pub use_ppo: bool,
}

impl Default for Toggles {
    fn default() -> Self {
        Self {
            use_ngm: true,
            use_path_entropy: true,
            use_ppo: true,
        }
    }
}

impl Toggles {
    /// Names of the disabled components, empty for the full method.
    pub fn ablations(&self) -> Vec<String> {
        let mut off = Vec::new();
        if !self.use_ngm {
            off.push("no-ngm".to_string());
        }
        if !self.use_path_entropy {
            off.push("no-path-entropy".to_string());
        }
        if !self.use_ppo {
            off.push("no-ppo".to_string());
        }
        off
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub run: RunSection,
    pub sizes: Sizes,
    pub ngm: NgmHyper,
    pub trainer: TrainerConfig,
    pub mask: MaskConfig,
    pub toggles: Toggles,
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self = toml::from_str(text).map_err(|e| ConfigError::Parse(e.message().to_string()))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String, ConfigError> {
        toml::to_string(self).map_err(|e| ConfigError::Parse(e.to_string()))
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |e: &dyn std::fmt::Display| ConfigError::Invalid(e.to_string());
        self.ngm.validate().map_err(|e| invalid(&e))?;
        self.effective_trainer().validate().map_err(|e| invalid(&e))?;
        self.mask.validate().map_err(|e| invalid(&e))?;
        if self.sizes.ngm == 0 || self.sizes.reward == 0 || self.sizes.eval == 0 {
            return Err(ConfigError::Invalid("sizes must all be positive".into()));
        }
        if self.run.benchmarks.is_empty() {
            return Err(ConfigError::Invalid("run.benchmarks is empty".into()));
        }
        if self.run.seeds.is_empty() {
            return Err(ConfigError::Invalid("run.seeds is empty".into()));
        }
        Ok(())
    }

    /// Trainer settings with the toggles applied.
    pub fn effective_trainer(&self) -> TrainerConfig {
        let mut t = self.trainer.clone();
        t.use_ppo = t.use_ppo && self.toggles.use_ppo;
        if !self.toggles.use_path_entropy {
            t.alpha = 0.0;
        }
        t
    }

    pub fn experiment(&self) -> ExperimentConfig {
        ExperimentConfig {
            sizes: self.sizes,
            ngm: self.ngm,
            trainer: self.effective_trainer(),
            mask: self.mask,
            use_ngm: self.toggles.use_ngm,
        }
    }
}
