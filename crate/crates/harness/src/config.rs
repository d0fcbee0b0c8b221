//! Run configuration: one JSON document covering data, training,
//! evaluation, benchmarking and output. Every field has a default, unknown
//! fields are rejected, and the resolved document is echoed by each command.

use std::path::{Path, PathBuf};

use betaat::attacks::{AttackConfig, AttackKind};
use betaat::training::TrainConfig;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datasets::DatasetSpec;
use crate::report::Format;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("invalid config {path}: {source}")]
    Parse { path: PathBuf, source: serde_json::Error },
    #[error("inconsistent config: {0}")]
    Inconsistent(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    #[default]
    Test,
    Train,
    All,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub attacks: Vec<AttackKind>,
    pub attack: AttackConfig,
    /// Grid half-width: `2r+1` points per axis.
    pub grid_resolution: usize,
    pub split: Split,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            attacks: vec![AttackKind::Fgsm, AttackKind::Pgd, AttackKind::Beta],
            attack: AttackConfig { steps: 20, ..AttackConfig::default() },
            grid_resolution: 20,
            split: Split::Test,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchConfig {
    pub attacks: Vec<AttackKind>,
    pub steps: Vec<usize>,
    pub repeats: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            attacks: vec![AttackKind::Pgd, AttackKind::Beta],
            steps: vec![0, 10, 20],
            repeats: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub dataset: DatasetSpec,
    /// Fraction of the dataset held out for testing.
    pub test_fraction: f64,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub bench: BenchConfig,
    pub checkpoint: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub format: Format,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetSpec::default(),
            test_fraction: 0.25,
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            bench: BenchConfig::default(),
            checkpoint: None,
            out_dir: PathBuf::from("out"),
            format: Format::Csv,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read { path: path.into(), source })?;
        Self::parse(&text, path)
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self, ConfigError> {
        serde_json::from_str(text).map_err(|source| ConfigError::Parse { path: path.into(), source })
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("serializable");
        s.push('\n');
        s
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if !(0.0..1.0).contains(&self.test_fraction) {
            return Err(ConfigError::Inconsistent(format!("test_fraction must lie in [0, 1), got {}", self.test_fraction)));
        }
        self.train.validate().map_err(|e| ConfigError::Inconsistent(e.to_string()))?;
        self.eval.attack.validate().map_err(|e| ConfigError::Inconsistent(e.to_string()))?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_and_unknown_fields_fail() {
        let c = RunConfig::default();
        let back = RunConfig::parse(&c.to_json(), Path::new("x")).unwrap();
        assert_eq!(back, c);
        assert!(RunConfig::parse(r#"{"trian": {}}"#, Path::new("x")).is_err());
        assert!(RunConfig::parse(r#"{"train": {"epoch": 3}}"#, Path::new("x")).is_err());
        let partial = RunConfig::parse(r#"{"train": {"epochs": 3}}"#, Path::new("x")).unwrap();
        assert_eq!(partial.train.epochs, 3);
        assert_eq!(partial.train.batch_size, TrainConfig::default().batch_size);
    }
}
