//! Declarative run configuration. Missing keys take the defaults below;
//! unknown keys are rejected.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{ParameterGrid, SplitSpec, TargetMode};
use crate::eval::SpectrumScore;
use crate::pipeline::PipelineConfig;
use crate::wave::{FrequencyGrid, SubstrateSpec};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("invalid config: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VerifyConfig {
    /// Test-split targets scored by `evaluate`.
    pub n_targets: usize,
    pub score: SpectrumScore,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        Self {
            n_targets: 50,
            score: SpectrumScore::S21,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub substrate: SubstrateSpec,
    pub parameter_grid: ParameterGrid,
    pub frequency_grid: FrequencyGrid,
    pub split: SplitSpec,
    pub target_mode: TargetMode,
    /// Training seed and per-model settings. Seeds inside the nested
    /// training configs are replaced by the derived per-stage seeds.
    pub pipeline: PipelineConfig,
    pub verify: VerifyConfig,
    /// Run directory used when `--out` is not given.
    pub out_dir: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            substrate: SubstrateSpec::default(),
            parameter_grid: ParameterGrid::default(),
            frequency_grid: FrequencyGrid::default(),
            split: SplitSpec::default(),
            target_mode: TargetMode::Minmax,
            pipeline: PipelineConfig::default(),
            verify: VerifyConfig::default(),
            out_dir: "run".into(),
        }
    }
}

impl RunConfig {
    /// Default settings on the reduced desk grid.
    pub fn desk() -> Self {
        Self {
            parameter_grid: ParameterGrid::desk(),
            ..Self::default()
        }
    }

    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let c: Self = serde_json::from_str(text)?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config is always serializable")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |e: &dyn std::fmt::Display| ConfigError::Invalid(e.to_string());
        self.substrate.validate().map_err(|e| invalid(&e))?;
        self.frequency_grid.validate().map_err(|e| invalid(&e))?;
        self.parameter_grid.validate().map_err(|e| invalid(&e))?;
        for t in [
            &self.pipeline.fim,
            &self.pipeline.ffm,
            &self.pipeline.rrm,
            &self.pipeline.corrector,
        ] {
            t.validate().map_err(|e| invalid(&e))?;
        }
        if self.pipeline.irc_iterations == 0 {
            return Err(ConfigError::Invalid("pipeline.irc_iterations must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.pipeline.dropout_rate) {
            return Err(ConfigError::Invalid("pipeline.dropout_rate must be in [0, 1)".into()));
        }
        for (name, f) in [
            ("split.train_fraction", self.split.train_fraction),
            ("split.validation_fraction", self.split.validation_fraction),
        ] {
            if !(f > 0.0 && f < 1.0) {
                return Err(ConfigError::Invalid(format!("{name} must be in (0, 1)")));
            }
        }
        Ok(())
    }
}
