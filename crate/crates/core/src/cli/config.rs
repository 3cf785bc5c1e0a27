use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::CliError;
use crate::datagen::{FilterThresholds, GenSetConfig};
use crate::denoiser::{ModelConfig, NoiseSchedule, ScheduleMode};
use crate::sampler::{GuidanceConfig, GuidanceMode};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleSection {
    pub mode: ScheduleMode,
    /// Number of discrete training timesteps `T`.
    pub steps: usize,
}

impl Default for ScheduleSection {
    fn default() -> Self {
        Self {
            mode: ScheduleMode::Flow,
            steps: 1000,
        }
    }
}

impl ScheduleSection {
    pub fn schedule(&self) -> Result<NoiseSchedule, CliError> {
        Ok(NoiseSchedule::new(self.mode, self.steps)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub steps: usize,
    pub learning_rate: f64,
    /// Procedural object sets rendered when no manifest is given.
    pub sets: usize,
    pub views: usize,
    pub max_refs: usize,
    pub drop_refs: f64,
    pub drop_caption: f64,
    pub drop_both: f64,
    /// Save a checkpoint every this many steps (0 saves only at the end).
    pub checkpoint_every: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            steps: 200,
            learning_rate: 3e-3,
            sets: 16,
            views: 3,
            max_refs: 2,
            drop_refs: 0.1,
            drop_caption: 0.1,
            drop_both: 0.05,
            checkpoint_every: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GuidanceSection {
    pub steps: usize,
    pub mode: String,
    pub lambda_i: f64,
    pub lambda_i_ramp: f64,
    pub lambda_c: f64,
    pub phi: f64,
}

impl Default for GuidanceSection {
    fn default() -> Self {
        Self {
            steps: 50,
            mode: "normalized".into(),
            lambda_i: 8.0,
            lambda_i_ramp: 5.0,
            lambda_c: 7.5,
            phi: 0.6,
        }
    }
}

impl GuidanceSection {
    pub fn guidance(&self) -> Result<GuidanceConfig, CliError> {
        let cfg = GuidanceConfig {
            lambda_i: self.lambda_i,
            lambda_i_ramp: self.lambda_i_ramp,
            lambda_c: self.lambda_c,
            mode: GuidanceMode::parse(&self.mode, self.phi)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Every tunable of a run. Flags given on the command line override it.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub schedule: ScheduleSection,
    pub train: TrainSection,
    pub guidance: GuidanceSection,
    pub generation: GenSetConfig,
    pub filter: FilterThresholds,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    /// SHA-256 of the canonical TOML form.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml().as_bytes()))
    }
}
