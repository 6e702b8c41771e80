//! Stage-2 training loop.
//!
//! Per batch: encode the full token grid of one unaugmented view per
//! sequence, mean-pool, project (batch norm) to `z`, predict `p = h(z)`,
//! normalize both, take the nearest queue entry of each `z` as its positive,
//! and step on the contrastive loss of `(nn, p)`. The batch's `z` is enqueued
//! after the step. Until the queue holds a full batch, batches only seed it.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use ndarray::Axis;
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::loss::nnclr_loss_and_grad;
use super::queue::SupportQueue;
use super::schedule::{build_tune_schedule, TuneSchedule};
use crate::checkpoint::{self, CheckpointMeta, STAGE_STARS};
use crate::data::{segment, DataConfig, Dataset, SegmentedSequence};
use crate::error::{Error, Result};
use crate::nn::forward::{embed_backward, embed_sequence, encoder_backward, encoder_forward, EncoderCache};
use crate::nn::heads::{
    l2_normalize_backward, l2_normalize_rows, predict_backward, predict_forward, project_backward, project_forward,
    update_running_stats, BatchMoments, Mode,
};
use crate::nn::{Mat, ModelParams};
use crate::optim::{AdamW, AdamWConfig};
use crate::pretrain::{EpochRecord, CHUNK, LOG_FILE};
use crate::rng::{self, purpose};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TuneMode {
    /// Heads and upper encoder trained jointly from the start.
    TwoStage,
    /// Heads first with the encoder frozen, then joint tuning.
    ThreeStage,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Stage2Config {
    pub epochs: usize,
    pub batch_size: usize,
    pub tau2: f64,
    pub base_lr: f64,
    pub decay: f64,
    pub freeze_lower_half: bool,
    pub queue_size: usize,
    pub optimizer: AdamWConfig,
    pub mode: TuneMode,
    /// Head-initialization epochs, used in three-stage mode only.
    pub head_epochs: usize,
    pub seed: u64,
}

impl Default for Stage2Config {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 32,
            tau2: 0.07,
            base_lr: 1e-3,
            decay: 0.2,
            freeze_lower_half: true,
            queue_size: 8192,
            optimizer: AdamWConfig::default(),
            mode: TuneMode::TwoStage,
            head_epochs: 0,
            seed: 0,
        }
    }
}

impl Stage2Config {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau2 > 0.0 && self.tau2.is_finite()) {
            return Err(Error::invalid("tau2", format!("{} must be > 0", self.tau2)));
        }
        if self.batch_size < 2 {
            return Err(Error::invalid("batch_size", "must be >= 2"));
        }
        if self.queue_size == 0 {
            return Err(Error::invalid("queue_size", "must be >= 1"));
        }
        Ok(())
    }

    pub fn schedule(&self, layers: usize) -> Result<TuneSchedule> {
        build_tune_schedule(self.base_lr, self.decay, layers, self.freeze_lower_half)
    }
}

struct EncodedSample {
    tokens: SegmentedSequence,
    cache: EncoderCache,
    rows: usize,
}

/// Forward state of one batch, kept for the backward pass.
pub struct Stage2Forward {
    samples: Vec<EncodedSample>,
    project_cache: crate::nn::heads::ProjectCache,
    predict_cache: crate::nn::heads::PredictCache,
    moments: Option<BatchMoments>,
    /// Normalized projector outputs (enqueued after the step).
    pub z: Mat,
    /// Normalized predictor outputs.
    pub p: Mat,
    p_norms: ndarray::Array1<f64>,
}

/// Encoder, pooling, projector (training mode) and predictor for a batch.
pub fn stage2_forward(params: &ModelParams, views: &[SegmentedSequence]) -> Result<Stage2Forward> {
    let encoded = views
        .par_iter()
        .map(|seg| {
            let x = embed_sequence(seg, params)?;
            let (y, cache) = encoder_forward(params, &x);
            Ok((
                y.mean_axis(Axis(0)).expect("nonempty grid"),
                EncodedSample {
                    tokens: seg.clone(),
                    cache,
                    rows: y.nrows(),
                },
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    let c = params.config.embed_dim;
    let mut pooled = Mat::zeros((encoded.len(), c));
    for (i, (row, _)) in encoded.iter().enumerate() {
        pooled.row_mut(i).assign(row);
    }
    let samples = encoded.into_iter().map(|(_, s)| s).collect();
    let (z_raw, project_cache, moments) = project_forward(&params.projector, &params.bn_stats, &pooled, Mode::Train)?;
    let (p_raw, predict_cache) = predict_forward(&params.predictor, &z_raw)?;
    let (z, _) = l2_normalize_rows(&z_raw);
    let (p, p_norms) = l2_normalize_rows(&p_raw);
    Ok(Stage2Forward {
        samples,
        project_cache,
        predict_cache,
        moments,
        z,
        p,
        p_norms,
    })
}

/// Contrastive loss against fixed `neighbors` and its gradient. The encoder
/// backward pass is skipped when `encoder_frozen` is set.
pub fn stage2_backward(
    params: &ModelParams,
    fwd: &Stage2Forward,
    neighbors: &Mat,
    tau: f64,
    encoder_frozen: bool,
) -> Result<(f64, ModelParams)> {
    let (loss, dp) = nnclr_loss_and_grad(neighbors, &fwd.p, tau)?;
    let mut grad = params.zeros_like();
    let dp_raw = l2_normalize_backward(&fwd.p, &fwd.p_norms, &dp);
    let dz_raw = predict_backward(&params.predictor, &fwd.predict_cache, &dp_raw, &mut grad.predictor);
    let dpooled = project_backward(&params.projector, &fwd.project_cache, &dz_raw, &mut grad.projector);
    if !encoder_frozen {
        let partials = fwd
            .samples
            .par_chunks(CHUNK)
            .enumerate()
            .map(|(chunk_id, chunk)| {
                let mut g = params.zeros_like();
                for (k, s) in chunk.iter().enumerate() {
                    let i = chunk_id * CHUNK + k;
                    let row = dpooled.row(i).to_owned() / s.rows as f64;
                    let dy = Mat::from_shape_fn((s.rows, row.len()), |(_, j)| row[j]);
                    let dx = encoder_backward(params, &s.cache, &dy, &mut g);
                    let cells: Vec<usize> = (0..s.rows).collect();
                    embed_backward(&s.tokens, &cells, &dx, params, &mut g);
                }
                g
            })
            .collect::<Vec<_>>();
        for g in &partials {
            grad.add_scaled(g, 1.0);
        }
    }
    Ok((loss, grad))
}

pub struct Stage2Outcome {
    pub params: ModelParams,
    pub history: Vec<EpochRecord>,
    pub schedule: TuneSchedule,
}

struct Phase<'a> {
    name: &'static str,
    epochs: usize,
    schedule: &'a TuneSchedule,
}

/// Runs head initialization (three-stage mode) and tuning.
pub fn train_stage2(
    dataset: &Dataset,
    config: &Stage2Config,
    data: &DataConfig,
    mut params: ModelParams,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<Stage2Outcome> {
    config.validate()?;
    data.preprocess.validate(params.config.segment_len)?;
    if dataset.len() < 2 {
        return Err(Error::invalid("dataset", "stage 2 needs at least 2 sequences"));
    }
    let layers = params.config.encoder_layers;
    let schedule = config.schedule(layers)?;
    let heads = TuneSchedule::heads_only(config.base_lr, layers);
    let mut phases = Vec::new();
    if config.mode == TuneMode::ThreeStage {
        phases.push(Phase {
            name: "head_init",
            epochs: config.head_epochs,
            schedule: &heads,
        });
    }
    phases.push(Phase {
        name: "tune",
        epochs: config.epochs,
        schedule: &schedule,
    });

    let mut queue = SupportQueue::new(config.queue_size, params.config.embed_dim)?;
    let mut optimizer = AdamW::new(&params, config.optimizer.clone());
    let mut history = Vec::new();
    let mut global_epoch = 0u64;
    for phase in &phases {
        let lrs: Vec<f64> = params
            .tensors()
            .iter()
            .map(|t| phase.schedule.lr_for(params.group_of(&t.name)))
            .collect();
        let names: Vec<String> = params.tensors().into_iter().map(|t| t.name).collect();
        let lr_of = |name: &str| lrs[names.iter().position(|n| n == name).expect("known tensor")];
        let encoder_frozen = (1..=layers).all(|i| phase.schedule.layer_lrs[i - 1] == 0.0);
        for epoch in 1..=phase.epochs {
            global_epoch += 1;
            let started = Instant::now();
            let mut order: Vec<usize> = (0..dataset.len()).collect();
            order.shuffle(&mut rng::stream(&[config.seed, purpose::STAGE2_ORDER, global_epoch]));
            let (mut loss_sum, mut batches) = (0.0, 0usize);
            for (batch_id, indices) in order.chunks(config.batch_size).enumerate() {
                if indices.len() < 2 {
                    continue;
                }
                let views = indices
                    .par_iter()
                    .map(|&i| {
                        let mut rng = rng::stream(&[config.seed, purpose::STAGE2_VIEW, i as u64, global_epoch]);
                        let view = data.preprocess.train_view(&dataset.sequences[i], &mut rng)?;
                        segment(&view, params.config.segment_len)
                    })
                    .collect::<Result<Vec<_>>>()?;
                let fwd = stage2_forward(&params, &views)?;
                if queue.len() >= indices.len() {
                    let neighbors = queue.nearest_batch(&fwd.z)?;
                    let (loss, grad) = stage2_backward(&params, &fwd, &neighbors, config.tau2, encoder_frozen)?;
                    if !loss.is_finite() || !grad.sum_squares().is_finite() {
                        return Err(Error::Diverged {
                            epoch,
                            batch: batch_id,
                            lr: config.base_lr,
                            grad_norm: grad.sum_squares().sqrt(),
                        });
                    }
                    optimizer.step(&mut params, &grad, lr_of);
                    loss_sum += loss;
                    batches += 1;
                }
                if let Some(m) = &fwd.moments {
                    update_running_stats(&mut params.bn_stats, m);
                }
                queue.update(&fwd.z)?;
            }
            let record = EpochRecord {
                epoch,
                mean_loss: if batches > 0 {
                    loss_sum / batches as f64
                } else {
                    f64::NAN
                },
                lr: config.base_lr,
                wall_ms: started.elapsed().as_millis() as u64,
                phase: Some(phase.name.to_string()),
            };
            on_epoch(&record);
            history.push(record);
        }
    }
    Ok(Stage2Outcome {
        params,
        history,
        schedule,
    })
}

/// Trains and writes the stage-2 checkpoint and log into `out`.
pub fn run_stage2(
    dataset: &Dataset,
    config: &Stage2Config,
    data: &DataConfig,
    params: ModelParams,
    out: &Path,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<CheckpointMeta> {
    let mut log = String::new();
    let outcome = train_stage2(dataset, config, data, params, |r| {
        log.push_str(&serde_json::to_string(r).expect("record serializes"));
        log.push('\n');
        on_epoch(r);
    })?;
    let mut details = BTreeMap::new();
    details.insert("mode".into(), serde_json::to_value(config.mode)?);
    details.insert("schedule".into(), serde_json::to_value(&outcome.schedule)?);
    details.insert("stage2".into(), serde_json::to_value(config)?);
    details.insert("data".into(), serde_json::to_value(data)?);
    let meta = checkpoint::save_checkpoint(out, &outcome.params, STAGE_STARS, config.seed, config.epochs, details)?;
    let path = out.join(LOG_FILE);
    std::fs::write(&path, log).map_err(|e| Error::io(&path, e))?;
    Ok(meta)
}
