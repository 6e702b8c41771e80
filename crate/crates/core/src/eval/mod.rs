//! Frozen-feature evaluation: extraction, KNN, few-shot and linear probe.

mod features;
mod fts;
mod knn;
mod probe;

pub use features::{extract_features, FeatureMeta, FeatureSet};
pub use fts::{decode_features, encode_features, read_features, sidecar_path, write_features, FTS1_MAGIC};
pub use knn::{few_shot_eval, knn_eval, knn_predict, select_exemplars};
pub use probe::{linear_probe, ProbeConfig};

use serde::{Deserialize, Serialize};

/// Result object printed by the evaluation commands.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub protocol: String,
    pub k_or_n: usize,
    pub accuracy: f64,
    pub train_size: usize,
    pub test_size: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub k: usize,
    pub shots: usize,
    pub probe: ProbeConfig,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            k: 1,
            shots: 1,
            probe: ProbeConfig::default(),
        }
    }
}
