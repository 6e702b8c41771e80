use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{segment, Dataset, PreprocessConfig};
use crate::error::{Error, Result};
use crate::nn::{pooled_features, ModelParams};

/// Where a feature matrix came from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureMeta {
    pub checkpoint_hash: Option<String>,
    pub stage: Option<String>,
    pub test_trim: f64,
    pub target_length: usize,
    pub centered: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSet {
    pub features: Array2<f64>,
    pub labels: Vec<usize>,
    pub ids: Vec<String>,
    pub meta: FeatureMeta,
}

impl FeatureSet {
    pub fn new(features: Array2<f64>, labels: Vec<usize>, ids: Vec<String>, meta: FeatureMeta) -> Result<Self> {
        let fs = Self {
            features,
            labels,
            ids,
            meta,
        };
        fs.validate()?;
        Ok(fs)
    }

    pub fn validate(&self) -> Result<()> {
        let rows = self.features.nrows();
        if self.labels.len() != rows || self.ids.len() != rows {
            return Err(Error::shape(
                "feature set",
                format!("{rows} labels and ids"),
                format!("{} labels, {} ids", self.labels.len(), self.ids.len()),
            ));
        }
        if let Some(index) = self.features.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                what: "features",
                index,
            });
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }
}

/// Mean-pooled encoder output of the centered test view of every sequence.
pub fn extract_features(
    params: &ModelParams,
    dataset: &Dataset,
    preprocess: &PreprocessConfig,
    checkpoint_hash: Option<String>,
    stage: Option<String>,
) -> Result<FeatureSet> {
    let cfg = &params.config;
    preprocess.validate(cfg.segment_len)?;
    if preprocess.target_length / cfg.segment_len > cfg.max_segments {
        return Err(Error::CheckpointMismatch(format!(
            "target length {} gives more than {} segments",
            preprocess.target_length, cfg.max_segments
        )));
    }
    let rows = dataset
        .sequences
        .par_iter()
        .map(|seq| {
            if seq.num_joints() != cfg.joints || seq.num_channels() != cfg.channels {
                return Err(Error::CheckpointMismatch(format!(
                    "sequence has {} joints x {} channels, model expects {} x {}",
                    seq.num_joints(),
                    seq.num_channels(),
                    cfg.joints,
                    cfg.channels
                )));
            }
            let view = preprocess.test_view(seq)?;
            pooled_features(&segment(&view, cfg.segment_len)?, params)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut features = Array2::zeros((rows.len(), cfg.embed_dim));
    for (i, r) in rows.iter().enumerate() {
        features.row_mut(i).assign(r);
    }
    FeatureSet::new(
        features,
        dataset.labels(),
        dataset.manifest.entries.iter().map(|e| e.id.clone()).collect(),
        FeatureMeta {
            checkpoint_hash,
            stage,
            test_trim: preprocess.test_trim,
            target_length: preprocess.target_length,
            centered: true,
        },
    )
}
