//! Structured pipeline configuration with strict parsing: unknown keys are
//! rejected and nested invariants are checked before any subcommand runs.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::prompts::{MergeMode, MergePolicy};
use crate::recaption::EndpointConfig;
use crate::rounds::LoopConfig;
use crate::spatialqa::MarginConfig;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("config parse error: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("invalid config field {field}: {reason}")]
    Invalid { field: String, reason: String },
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsConfig {
    #[serde(default)]
    pub input: Option<String>,
    #[serde(default)]
    pub output: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    #[serde(default)]
    pub endpoint: EndpointConfig,
    #[serde(rename = "loop", default)]
    pub loop_cfg: LoopConfig,
    #[serde(default)]
    pub merge: MergePolicy,
    #[serde(default)]
    pub margins: MarginConfig,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_model_id")]
    pub model_id: String,
    #[serde(default)]
    pub paths: PathsConfig,
}

fn default_model_id() -> String {
    "vlm".to_string()
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            endpoint: EndpointConfig::default(),
            loop_cfg: LoopConfig::default(),
            merge: MergePolicy::default(),
            margins: MarginConfig::default(),
            seed: 0,
            model_id: default_model_id(),
            paths: PathsConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let bytes = std::fs::read(path).map_err(|e| ConfigError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        let cfg: PipelineConfig = serde_json::from_slice(&bytes)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.endpoint.max_in_flight < 1 {
            return Err(invalid("endpoint.max_in_flight", "must be >= 1"));
        }
        if self.loop_cfg.max_rounds < 1 {
            return Err(invalid("loop.max_rounds", "must be >= 1"));
        }
        if self.loop_cfg.saturation_epsilon <= 0.0 {
            return Err(invalid("loop.saturation_epsilon", "must be > 0"));
        }
        if !(self.loop_cfg.recaption_fraction > 0.0 && self.loop_cfg.recaption_fraction <= 1.0) {
            return Err(invalid("loop.recaption_fraction", "must be in (0, 1]"));
        }
        if self.merge.mode == MergeMode::Concatenated && self.merge.separator.is_empty() {
            return Err(invalid("merge.separator", "must be non-empty for concatenated mode"));
        }
        let m = &self.margins;
        if m.ratio < 1.0 {
            return Err(invalid("margins.ratio", "must be >= 1"));
        }
        if m.delta_x < 0.0 || m.delta_z < 0.0 || m.delta_u < 0.0 {
            return Err(invalid("margins", "margins must be non-negative"));
        }
        if m.tau_close <= 0.0 || m.tau_far <= m.tau_close {
            return Err(invalid("margins.tau_far", "need 0 < tau_close < tau_far"));
        }
        Ok(())
    }
}

fn invalid(field: &str, reason: &str) -> ConfigError {
    ConfigError::Invalid {
        field: field.to_string(),
        reason: reason.to_string(),
    }
}
