//! The single JSON run configuration consumed by every command.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{SplitSpec, SynthConfig};
use crate::model::config::hex_digest;
use crate::model::ModelConfig;
use crate::skeleton::{SkeletonGraph, DEFAULT_EDGES};
use crate::training::TrainConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {reason}")]
    Read { path: PathBuf, reason: String },
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    /// z-score over all entries of each sample.
    PerSample,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub root: Option<PathBuf>,
    pub split: SplitSpec,
    pub normalization: Normalization,
    pub synth: SynthConfig,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            root: None,
            split: SplitSpec::default(),
            normalization: Normalization::PerSample,
            synth: SynthConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SkeletonSection {
    pub edges: Vec<(usize, usize)>,
}

impl Default for SkeletonSection {
    fn default() -> Self {
        Self {
            edges: DEFAULT_EDGES.to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricsSection {
    /// PCK thresholds in percent of torso length.
    pub pck_thresholds: Vec<u32>,
}

impl Default for MetricsSection {
    fn default() -> Self {
        Self {
            pck_thresholds: crate::metrics::PCK_THRESHOLDS.to_vec(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: DataSection,
    pub skeleton: SkeletonSection,
    pub model: ModelConfig,
    pub training: TrainConfig,
    pub metrics: MetricsSection,
}

impl RunConfig {
    /// Reduced model and schedule for single-CPU runs on synthetic data.
    pub fn desk() -> Self {
        Self {
            model: ModelConfig::desk(),
            training: TrainConfig::desk(),
            ..Self::default()
        }
    }

    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| ConfigError::Invalid(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Read {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Hex SHA-256 of the compact JSON form.
    pub fn digest(&self) -> String {
        hex_digest(serde_json::to_string(self).expect("config serializes").as_bytes())
    }

    pub fn skeleton_graph(&self) -> Result<SkeletonGraph, ConfigError> {
        SkeletonGraph::new(self.model.joints, &self.skeleton.edges).map_err(|e| ConfigError::Invalid(e.to_string()))
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let inv = |e: &dyn std::fmt::Display| ConfigError::Invalid(e.to_string());
        self.model.validate().map_err(|e| inv(&e))?;
        self.training.validate().map_err(|e| inv(&e))?;
        self.data.synth.validate().map_err(|e| inv(&e))?;
        self.skeleton_graph()?;
        let m = &self.metrics.pck_thresholds;
        if m.is_empty() || m.iter().any(|k| !crate::metrics::PCK_THRESHOLDS.contains(k)) {
            return Err(ConfigError::Invalid(format!(
                "metrics.pck_thresholds must be a non-empty subset of {:?}",
                crate::metrics::PCK_THRESHOLDS
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let c = RunConfig::desk();
        let back = RunConfig::from_json(&c.to_json()).unwrap();
        assert_eq!(c, back);
        assert_eq!(c.digest(), back.digest());
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(RunConfig::from_json(r#"{"modle": {}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"model": {"blocks": 4, "colour": 1}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"training": {"lr0": -1.0}}"#).is_err());
        assert!(RunConfig::from_json("{}").is_ok());
    }

    #[test]
    fn digest_changes_with_content() {
        let mut c = RunConfig::default();
        let d0 = c.digest();
        c.training.seed = 9;
        assert_ne!(d0, c.digest());
    }
}
