//! Layered run configuration: built-in defaults, then a JSON file, then
//! `--set key.path=value` overrides. The effective configuration is hashed
//! into every artifact.

use std::path::Path;

use prominence::corpus::DEFAULT_RATIOS;
use prominence::experiments::{BudgetConfig, PAPER_BUDGETS};
use prominence::features::FeatureConfig;
use prominence::model::ModelConfig;
use prominence::training::TrainConfig;
use prominence::wavelet::ComponentWeights;
use prominence_service::ServiceConfig;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PartitionConfig {
    /// Train, validation and test fractions.
    pub ratios: (f64, f64, f64),
    pub seed: u64,
}

impl Default for PartitionConfig {
    fn default() -> Self {
        Self {
            ratios: DEFAULT_RATIOS,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AggregateConfig {
    /// Fraction of (annotator, word) cells held out to score the Rasch model.
    pub heldout_fraction: f64,
    pub seed: u64,
}

impl Default for AggregateConfig {
    fn default() -> Self {
        Self {
            heldout_fraction: 0.1,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StudyKind {
    Ablation,
    Scaling,
    Redundancy,
    SelfTraining,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StudyConfig {
    pub kind: StudyKind,
    pub seeds: Vec<u64>,
    pub parallelism: usize,
    /// Training set sizes for the scaling study.
    pub sizes: Vec<usize>,
    pub budgets: Vec<BudgetConfig>,
    /// Utterances reserved for validation plus test in the redundancy study.
    pub eval_count: usize,
    pub split_seed: u64,
}

impl Default for StudyConfig {
    fn default() -> Self {
        Self {
            kind: StudyKind::Ablation,
            seeds: vec![0, 1, 2],
            parallelism: 1,
            sizes: vec![250, 500, 1000, 2000],
            budgets: PAPER_BUDGETS.to_vec(),
            eval_count: 200,
            split_seed: 0,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub features: FeatureConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub partition: PartitionConfig,
    pub aggregate: AggregateConfig,
    pub baseline: ComponentWeights,
    pub study: StudyConfig,
    pub service: ServiceConfig,
}

/// Parses `a.b.c=value` into `{"a": {"b": {"c": value}}}`. The value is read
/// as JSON when it parses, otherwise as a string.
pub fn override_value(assignment: &str) -> Result<Value, CliError> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| CliError::Usage(format!("override `{assignment}` is not KEY=VALUE")))?;
    if path.is_empty() || path.split('.').any(str::is_empty) {
        return Err(CliError::Usage(format!("override `{assignment}` has an empty key")));
    }
    let mut value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    for key in path.rsplit('.') {
        value = Value::Object([(key.to_string(), value)].into_iter().collect());
    }
    Ok(value)
}

impl RunConfig {
    pub fn load(file: Option<&Path>, overrides: &[String]) -> Result<Self, CliError> {
        let mut merged = serde_json::to_value(Self::default()).expect("defaults serialize");
        if let Some(path) = file {
            let bytes = std::fs::read(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
            let layer: Value =
                serde_json::from_slice(&bytes).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
            json_patch::merge(&mut merged, &layer);
        }
        for assignment in overrides {
            json_patch::merge(&mut merged, &override_value(assignment)?);
        }
        let config: Self =
            serde_json::from_value(merged).map_err(|e| CliError::Usage(format!("invalid configuration: {e}")))?;
        config.model.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        config.train.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        Ok(config)
    }

    /// Hex SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(serde_json::to_vec(self).expect("config serializes")))
    }
}
