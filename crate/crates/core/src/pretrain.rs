//! Stage 1: masked motion prediction.
//!
//! Per sequence: random trim/resize, segment into tokens, temporal-difference
//! motion, motion-intensity masking probabilities, Gumbel-Max selection of
//! masked cells. The encoder sees the visible cells, the decoder fills in mask
//! tokens and regresses the motion of every masked cell.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use ndarray::{Array1, Axis};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, CheckpointMeta, STAGE_MAMP};
use crate::data::{augment_all, segment, DataConfig, Dataset, SegmentedSequence, SkeletonSequence};
use crate::error::{Error, Result};
use crate::masking::{plan_mask, MaskingConfig, MotionField};
use crate::nn::forward::{
    decoder_backward, decoder_forward, embed_backward, embed_sequence, encoder_backward, encoder_forward, TokenBatch,
};
use crate::nn::{Mat, ModelParams};
use crate::optim::{warmup_cosine, AdamW, AdamWConfig};
use crate::rng::{self, purpose};

/// Samples per gradient-accumulation chunk; fixed so results do not depend
/// on the thread count.
pub(crate) const CHUNK: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Stage1Config {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Fraction of total steps spent in linear warmup.
    pub warmup_fraction: f64,
    pub optimizer: AdamWConfig,
    pub masking: MaskingConfig,
    /// Standardize motion targets per channel over each sequence.
    pub standardize_targets: bool,
    pub seed: u64,
}

impl Default for Stage1Config {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 16,
            lr: 1e-3,
            warmup_fraction: 0.05,
            optimizer: AdamWConfig::default(),
            masking: MaskingConfig::default(),
            standardize_targets: false,
            seed: 0,
        }
    }
}

impl Stage1Config {
    pub fn validate(&self) -> Result<()> {
        self.masking.validate()?;
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size", "must be >= 1"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid("lr", format!("{} must be > 0", self.lr)));
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return Err(Error::invalid("warmup_fraction", "must be in [0, 1)"));
        }
        let o = &self.optimizer;
        if !(o.beta1 > 0.0 && o.beta1 < 1.0 && o.beta2 > 0.0 && o.beta2 < 1.0) {
            return Err(Error::invalid("betas", "must lie in (0, 1)"));
        }
        if o.weight_decay.is_nan() || o.weight_decay < 0.0 || o.eps.is_nan() || o.eps <= 0.0 {
            return Err(Error::invalid("optimizer", "weight decay >= 0 and eps > 0"));
        }
        Ok(())
    }
}

/// Motion targets for the masked cells of one sequence, one row per cell in
/// `masked` order.
#[derive(Clone, Debug, PartialEq)]
pub struct ReconstructionTarget {
    pub values: Mat,
    /// Per-channel (mean, std) when targets are standardized.
    pub standardization: Option<(Array1<f64>, Array1<f64>)>,
}

/// One prepared training sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct Stage1Sample {
    pub tokens: SegmentedSequence,
    pub kept: Vec<usize>,
    pub masked: Vec<usize>,
    pub target: ReconstructionTarget,
}

/// `sum over masked cells of |pred - target|^2`, divided by the number of
/// masked cells across the batch.
pub fn mamp_loss(pred: &[Mat], targets: &[Mat]) -> Result<f64> {
    if pred.len() != targets.len() {
        return Err(Error::shape("prediction batch", targets.len(), pred.len()));
    }
    let mut cells = 0usize;
    let mut total = 0.0;
    for (p, t) in pred.iter().zip(targets) {
        if p.dim() != t.dim() {
            return Err(Error::shape(
                "prediction",
                format!("{:?}", t.dim()),
                format!("{:?}", p.dim()),
            ));
        }
        cells += p.nrows();
        total += (p - t).mapv(|d| d * d).sum();
    }
    if cells == 0 {
        return Err(Error::invalid("masked_indices", "empty mask set"));
    }
    Ok(total / cells as f64)
}

fn gather_targets(field: &MotionField, masked: &[usize], joints: usize, standardize: bool) -> ReconstructionTarget {
    let channels = field.motion().dim().2;
    let width = field.segment_len() * channels;
    let mut values = Mat::zeros((masked.len(), width));
    for (row, &cell) in masked.iter().enumerate() {
        let v = field.cell(cell / joints, cell % joints);
        values.row_mut(row).assign(&Array1::from_vec(v));
    }
    let standardization = standardize.then(|| {
        let flat = field
            .motion()
            .to_shape((field.motion().len() / channels, channels))
            .expect("contiguous")
            .to_owned();
        let mean = flat.mean_axis(Axis(0)).expect("nonempty");
        let std = flat.std_axis(Axis(0), 0.0).mapv(|s| s.max(1e-6));
        for mut row in values.rows_mut() {
            for (k, x) in row.iter_mut().enumerate() {
                *x = (*x - mean[k % channels]) / std[k % channels];
            }
        }
        (mean, std)
    });
    ReconstructionTarget {
        values,
        standardization,
    }
}

/// Prepares one sequence from its own random stream.
pub fn prepare_sample(
    seq: &SkeletonSequence,
    data: &DataConfig,
    config: &Stage1Config,
    segment_len: usize,
    rng: &mut rng::StreamRng,
) -> Result<Stage1Sample> {
    let view = data.preprocess.train_view(seq, rng)?;
    let view = augment_all(&view, &data.augment, rng)?;
    let tokens = segment(&view, segment_len)?;
    let (field, plan) = plan_mask(&view, segment_len, &config.masking, rng)?;
    let target = gather_targets(&field, &plan.masked, view.num_joints(), config.standardize_targets);
    Ok(Stage1Sample {
        kept: plan.kept(),
        masked: plan.masked,
        tokens,
        target,
    })
}

/// Prepares the sequences at `indices` for `epoch`. Sample `i` uses the
/// stream `(seed, stage-1, i, epoch)`.
pub fn build_stage1_batch(
    dataset: &Dataset,
    indices: &[usize],
    data: &DataConfig,
    config: &Stage1Config,
    segment_len: usize,
    epoch: usize,
) -> Result<Vec<Stage1Sample>> {
    indices
        .par_iter()
        .map(|&i| {
            let mut rng = rng::stream(&[config.seed, purpose::STAGE1_BATCH, i as u64, epoch as u64]);
            prepare_sample(&dataset.sequences[i], data, config, segment_len, &mut rng)
        })
        .collect()
}

/// Embedded visible tokens of a prepared batch.
pub fn embed_visible(samples: &[Stage1Sample], params: &ModelParams) -> Result<TokenBatch> {
    let mut values = Vec::with_capacity(samples.len());
    for s in samples {
        values.push(embed_sequence(&s.tokens, params)?.select(Axis(0), &s.kept));
    }
    Ok(TokenBatch {
        values,
        cells: samples.iter().map(|s| s.kept.clone()).collect(),
    })
}

/// Forward + backward for one sample. Adds `d loss / d params` to `grad`,
/// where loss is the squared error divided by `denom`; returns the raw
/// squared-error sum.
pub fn sample_loss_and_grad(
    params: &ModelParams,
    sample: &Stage1Sample,
    denom: f64,
    grad: &mut ModelParams,
) -> Result<f64> {
    let x = embed_sequence(&sample.tokens, params)?.select(Axis(0), &sample.kept);
    let (latent, enc_cache) = encoder_forward(params, &x);
    let (pred, dec_cache) = decoder_forward(params, &latent, &sample.kept, &sample.masked)?;
    let diff = &pred - &sample.target.values;
    let sq = diff.mapv(|d| d * d).sum();
    let dpred = diff * (2.0 / denom);
    let dlatent = decoder_backward(params, &dec_cache, &dpred, grad);
    let dx = encoder_backward(params, &enc_cache, &dlatent, grad);
    embed_backward(&sample.tokens, &sample.kept, &dx, params, grad);
    Ok(sq)
}

/// Batch loss and summed gradient, accumulated over fixed chunks in order.
pub fn batch_loss_and_grad(params: &ModelParams, samples: &[Stage1Sample]) -> Result<(f64, ModelParams)> {
    let cells: usize = samples.iter().map(|s| s.masked.len()).sum();
    if cells == 0 {
        return Err(Error::invalid("masked_indices", "empty mask set"));
    }
    let denom = cells as f64;
    let partials = samples
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut grad = params.zeros_like();
            let mut sq = 0.0;
            for s in chunk {
                sq += sample_loss_and_grad(params, s, denom, &mut grad)?;
            }
            Ok((sq, grad))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut iter = partials.into_iter();
    let (mut sq, mut grad) = iter.next().expect("nonempty batch");
    for (s, g) in iter {
        sq += s;
        grad.add_scaled(&g, 1.0);
    }
    Ok((sq / denom, grad))
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    pub lr: f64,
    pub wall_ms: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub phase: Option<String>,
}

pub struct Stage1Outcome {
    pub params: ModelParams,
    pub best_params: ModelParams,
    pub best_epoch: usize,
    pub history: Vec<EpochRecord>,
}

/// Trains the encoder and decoder. Epochs are 1-based in the log.
pub fn train_stage1(
    dataset: &Dataset,
    config: &Stage1Config,
    data: &DataConfig,
    mut params: ModelParams,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<Stage1Outcome> {
    config.validate()?;
    data.preprocess.validate(params.config.segment_len)?;
    if dataset.is_empty() {
        return Err(Error::invalid("dataset", "no sequences"));
    }
    let segments = data.preprocess.target_length / params.config.segment_len;
    if segments > params.config.max_segments {
        return Err(Error::invalid(
            "target_length",
            format!(
                "{segments} segments exceed model max_segments {}",
                params.config.max_segments
            ),
        ));
    }
    let batches_per_epoch = dataset.len().div_ceil(config.batch_size);
    let total_steps = config.epochs * batches_per_epoch;
    let warmup = (config.warmup_fraction * total_steps as f64).ceil() as usize;
    let mut optimizer = AdamW::new(&params, config.optimizer.clone());
    let mut best = (0usize, f64::INFINITY, params.clone());
    let mut history = Vec::with_capacity(config.epochs);
    let mut step = 0usize;
    for epoch in 1..=config.epochs {
        let started = Instant::now();
        let mut order: Vec<usize> = (0..dataset.len()).collect();
        order.shuffle(&mut rng::stream(&[config.seed, purpose::STAGE1_ORDER, epoch as u64]));
        let (mut loss_sum, mut cell_sum) = (0.0, 0usize);
        let mut lr = 0.0;
        for (batch_id, indices) in order.chunks(config.batch_size).enumerate() {
            let samples = build_stage1_batch(dataset, indices, data, config, params.config.segment_len, epoch)?;
            let (loss, grad) = batch_loss_and_grad(&params, &samples)?;
            lr = warmup_cosine(step, total_steps, warmup, config.lr);
            if !loss.is_finite() || !grad.sum_squares().is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    batch: batch_id,
                    lr,
                    grad_norm: grad.sum_squares().sqrt(),
                });
            }
            optimizer.step(&mut params, &grad, |_| lr);
            let cells: usize = samples.iter().map(|s| s.masked.len()).sum();
            loss_sum += loss * cells as f64;
            cell_sum += cells;
            step += 1;
        }
        let record = EpochRecord {
            epoch,
            mean_loss: loss_sum / cell_sum as f64,
            lr,
            wall_ms: started.elapsed().as_millis() as u64,
            phase: None,
        };
        if record.mean_loss < best.1 {
            best = (epoch, record.mean_loss, params.clone());
        }
        on_epoch(&record);
        history.push(record);
    }
    let (best_epoch, _, best_params) = best;
    Ok(Stage1Outcome {
        params,
        best_params,
        best_epoch,
        history,
    })
}

/// Trains and writes `out/` (final), `out/best/` and `out/train_log.jsonl`.
pub fn run_stage1(
    dataset: &Dataset,
    config: &Stage1Config,
    data: &DataConfig,
    params: ModelParams,
    out: &Path,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<CheckpointMeta> {
    let mut log = String::new();
    let outcome = train_stage1(dataset, config, data, params, |r| {
        log.push_str(&serde_json::to_string(r).expect("record serializes"));
        log.push('\n');
        on_epoch(r);
    })?;
    let details = stage1_details(config, data);
    let meta = checkpoint::save_checkpoint(
        out,
        &outcome.params,
        STAGE_MAMP,
        config.seed,
        config.epochs,
        details.clone(),
    )?;
    checkpoint::save_checkpoint(
        out.join("best"),
        &outcome.best_params,
        STAGE_MAMP,
        config.seed,
        outcome.best_epoch,
        details,
    )?;
    let path = out.join(LOG_FILE);
    std::fs::write(&path, log).map_err(|e| Error::io(&path, e))?;
    Ok(meta)
}

pub const LOG_FILE: &str = "train_log.jsonl";

fn stage1_details(config: &Stage1Config, data: &DataConfig) -> BTreeMap<String, serde_json::Value> {
    let mut details = BTreeMap::new();
    details.insert("stage1".into(), serde_json::to_value(config).expect("serializable"));
    details.insert("data".into(), serde_json::to_value(data).expect("serializable"));
    details
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, PreprocessConfig, SynthConfig};
    use crate::nn::ModelConfig;

    #[test]
    fn loss_identities() {
        let t = Mat::from_shape_fn((3, 12), |(i, j)| (i * 12 + j) as f64 * 0.1);
        assert_eq!(
            mamp_loss(std::slice::from_ref(&t), std::slice::from_ref(&t)).unwrap(),
            0.0
        );
        let one = Mat::zeros((1, 12));
        assert_eq!(mamp_loss(&[&one + 1.0], std::slice::from_ref(&one)).unwrap(), 12.0);
        let p = &t + 0.3;
        let p2 = &t + 0.6;
        let base = mamp_loss(&[p], std::slice::from_ref(&t)).unwrap();
        let doubled = mamp_loss(&[p2], std::slice::from_ref(&t)).unwrap();
        assert!((doubled - 4.0 * base).abs() < 1e-12);
        assert!(mamp_loss(&[Mat::zeros((0, 12))], &[Mat::zeros((0, 12))]).is_err());
    }

    fn setup() -> (Dataset, DataConfig, Stage1Config, ModelConfig) {
        let synth = SynthConfig {
            classes: 2,
            per_class: 3,
            frames: 20,
            joints: 3,
            ..Default::default()
        };
        let data = DataConfig {
            preprocess: PreprocessConfig {
                target_length: 8,
                ..Default::default()
            },
            ..Default::default()
        };
        let model = ModelConfig {
            embed_dim: 8,
            encoder_layers: 1,
            decoder_layers: 1,
            heads: 2,
            ffn_hidden: 8,
            segment_len: 2,
            predictor_hidden: 8,
            joints: 3,
            max_segments: 4,
            channels: 3,
        };
        let cfg = Stage1Config {
            epochs: 2,
            batch_size: 4,
            ..Default::default()
        };
        (generate_synthetic(&synth, 1).unwrap(), data, cfg, model)
    }

    #[test]
    fn batch_partitions_grid_and_replays() {
        let (ds, data, cfg, model) = setup();
        let a = build_stage1_batch(&ds, &[0, 3, 5], &data, &cfg, 2, 1).unwrap();
        let b = build_stage1_batch(&ds, &[0, 3, 5], &data, &cfg, 2, 1).unwrap();
        assert_eq!(a, b);
        for s in &a {
            let mut all: Vec<usize> = s.kept.iter().chain(&s.masked).copied().collect();
            all.sort_unstable();
            assert_eq!(all, (0..12).collect::<Vec<_>>());
            assert_eq!(s.masked.len(), 11);
            assert_eq!(s.target.values.dim(), (11, 6));
        }
        let c = build_stage1_batch(&ds, &[0], &data, &cfg, 2, 2).unwrap();
        assert_ne!(a[0], c[0]);
        let vis = embed_visible(&a, &ModelParams::init(&model, 0).unwrap()).unwrap();
        assert_eq!(vis.values[0].nrows(), 1);
    }

    #[test]
    fn smallest_ratio_masks_one_cell() {
        let (ds, data, mut cfg, _) = setup();
        cfg.masking.ratio = 1e-3;
        let s = build_stage1_batch(&ds, &[1], &data, &cfg, 2, 1).unwrap();
        assert_eq!(s[0].masked.len(), 1);
        assert_eq!(s[0].kept.len(), 11);
    }

    #[test]
    fn standardized_targets_are_rescaled_motion() {
        let (ds, data, mut cfg, _) = setup();
        let raw = build_stage1_batch(&ds, &[2], &data, &cfg, 2, 1).unwrap();
        cfg.standardize_targets = true;
        let std = build_stage1_batch(&ds, &[2], &data, &cfg, 2, 1).unwrap();
        let (mean, sd) = std[0].target.standardization.clone().unwrap();
        let r = raw[0].target.values[[0, 4]];
        let s = std[0].target.values[[0, 4]];
        assert!(((r - mean[1]) / sd[1] - s).abs() < 1e-12);
    }

    #[test]
    fn zero_epochs_returns_initialization() {
        let (ds, data, mut cfg, model) = setup();
        cfg.epochs = 0;
        let init = ModelParams::init(&model, 3).unwrap();
        let out = train_stage1(&ds, &cfg, &data, init.clone(), |_| {}).unwrap();
        assert_eq!(out.params, init);
        assert!(out.history.is_empty());
    }

    #[test]
    fn training_is_deterministic_and_logs_epochs() {
        let (ds, data, cfg, model) = setup();
        let init = ModelParams::init(&model, 3).unwrap();
        let mut seen = Vec::new();
        let a = train_stage1(&ds, &cfg, &data, init.clone(), |r| seen.push(r.epoch)).unwrap();
        let b = train_stage1(&ds, &cfg, &data, init, |_| {}).unwrap();
        assert_eq!(seen, vec![1, 2]);
        assert_eq!(a.params, b.params);
        assert!(a.history.iter().all(|r| r.mean_loss.is_finite() && r.mean_loss >= 0.0));
    }

    #[test]
    fn segments_must_fit_positional_table() {
        let (ds, mut data, cfg, model) = setup();
        data.preprocess.target_length = 12;
        let init = ModelParams::init(&model, 3).unwrap();
        assert!(train_stage1(&ds, &cfg, &data, init, |_| {}).is_err());
    }
}
