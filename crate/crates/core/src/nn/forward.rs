//! Token embedding, encoder, mask-token decoder, and pooling.

use ndarray::{s, Axis};

use super::layers::{BlockCache, LayerNormCache, Mat};
use super::model::ModelParams;
use crate::data::SegmentedSequence;
use crate::error::{Error, Result};

/// Per-sample token matrices `(tokens, C_e)` and the grid cell (`t * V + v`)
/// each row occupies.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenBatch {
    pub values: Vec<Mat>,
    pub cells: Vec<Vec<usize>>,
}

impl TokenBatch {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

fn check_tokens(seg: &SegmentedSequence, params: &ModelParams) -> Result<()> {
    let cfg = &params.config;
    if seg.token_dim() != cfg.token_dim() {
        return Err(Error::shape("token width", cfg.token_dim(), seg.token_dim()));
    }
    if seg.num_joints() != cfg.joints {
        return Err(Error::shape("joint count", cfg.joints, seg.num_joints()));
    }
    if seg.num_segments() > cfg.max_segments {
        return Err(Error::shape(
            "segment count",
            format!("<= {}", cfg.max_segments),
            seg.num_segments(),
        ));
    }
    Ok(())
}

/// Token features flattened to `(T_e * V, l * C_s)` in cell order.
pub fn token_matrix(seg: &SegmentedSequence) -> Mat {
    let (te, v, d) = seg.tokens().dim();
    seg.tokens()
        .to_shape((te * v, d))
        .expect("contiguous tokens")
        .to_owned()
}

/// Embeds every cell: `W x + b + spatial[v] + temporal[t]`.
pub fn embed_sequence(seg: &SegmentedSequence, params: &ModelParams) -> Result<Mat> {
    check_tokens(seg, params)?;
    let v = seg.num_joints();
    let mut out = params.embed.proj.forward(&token_matrix(seg));
    for (cell, mut row) in out.rows_mut().into_iter().enumerate() {
        row += &params.embed.spatial.row(cell % v);
        row += &params.embed.temporal.row(cell / v);
    }
    Ok(out)
}

pub fn embed(batch: &[SegmentedSequence], params: &ModelParams) -> Result<TokenBatch> {
    let mut values = Vec::with_capacity(batch.len());
    let mut cells = Vec::with_capacity(batch.len());
    for seg in batch {
        let e = embed_sequence(seg, params)?;
        cells.push((0..e.nrows()).collect());
        values.push(e);
    }
    Ok(TokenBatch { values, cells })
}

/// Accumulates embedding gradients for the rows `cells` of one sample.
pub fn embed_backward(
    seg: &SegmentedSequence,
    cells: &[usize],
    d_rows: &Mat,
    params: &ModelParams,
    grad: &mut ModelParams,
) {
    let v = seg.num_joints();
    let x = token_matrix(seg).select(Axis(0), cells);
    params.embed.proj.backward(&x, d_rows, &mut grad.embed.proj);
    for (row, &cell) in d_rows.rows().into_iter().zip(cells) {
        let mut sp = grad.embed.spatial.row_mut(cell % v);
        sp += &row;
        let mut tp = grad.embed.temporal.row_mut(cell / v);
        tp += &row;
    }
}

pub struct EncoderCache {
    blocks: Vec<BlockCache>,
    norm: LayerNormCache,
}

/// Encoder blocks followed by the final layer norm.
pub fn encoder_forward(params: &ModelParams, x: &Mat) -> (Mat, EncoderCache) {
    let heads = params.config.heads;
    let mut h = x.clone();
    let mut blocks = Vec::with_capacity(params.encoder.len());
    for block in &params.encoder {
        let (y, cache) = block.forward(&h, heads);
        blocks.push(cache);
        h = y;
    }
    let (y, norm) = params.encoder_norm.forward(&h);
    (y, EncoderCache { blocks, norm })
}

pub fn encoder_backward(params: &ModelParams, cache: &EncoderCache, dy: &Mat, grad: &mut ModelParams) -> Mat {
    let heads = params.config.heads;
    let mut d = params.encoder_norm.backward(&cache.norm, dy, &mut grad.encoder_norm);
    for (i, block) in params.encoder.iter().enumerate().rev() {
        d = block.backward(&cache.blocks[i], &d, heads, &mut grad.encoder[i]);
    }
    d
}

/// Runs the encoder on the kept cells of each sample.
pub fn encode(batch: &TokenBatch, keep: &[Vec<usize>], params: &ModelParams) -> Result<TokenBatch> {
    if keep.len() != batch.len() {
        return Err(Error::shape("keep sets", batch.len(), keep.len()));
    }
    let mut values = Vec::with_capacity(batch.len());
    for ((x, cells), kept) in batch.values.iter().zip(&batch.cells).zip(keep) {
        if kept.is_empty() {
            return Err(Error::invalid("keep_indices", "no tokens kept"));
        }
        let rows = kept
            .iter()
            .map(|c| {
                cells
                    .iter()
                    .position(|x| x == c)
                    .ok_or_else(|| Error::invalid("keep_indices", format!("cell {c} not in token batch")))
            })
            .collect::<Result<Vec<_>>>()?;
        let (y, _) = encoder_forward(params, &x.select(Axis(0), &rows));
        values.push(y);
    }
    Ok(TokenBatch {
        values,
        cells: keep.to_vec(),
    })
}

pub struct DecoderCache {
    blocks: Vec<BlockCache>,
    norm: LayerNormCache,
    normed_masked: Mat,
    kept_count: usize,
    masked: Vec<usize>,
}

/// Decoder input for one sample: the latents followed by one mask token
/// (plus position embeddings) per masked cell. Returns predictions for the
/// masked cells only, in `masked` order.
pub fn decoder_forward(
    params: &ModelParams,
    latents: &Mat,
    kept: &[usize],
    masked: &[usize],
) -> Result<(Mat, DecoderCache)> {
    if masked.is_empty() {
        return Err(Error::invalid("masked_indices", "empty mask set"));
    }
    if latents.nrows() != kept.len() {
        return Err(Error::shape("latent rows", kept.len(), latents.nrows()));
    }
    if let Some(c) = masked.iter().find(|c| kept.contains(c)) {
        return Err(Error::invalid("masked_indices", format!("cell {c} is also visible")));
    }
    let cfg = &params.config;
    let v = cfg.joints;
    let c = cfg.embed_dim;
    let n = kept.len() + masked.len();
    let mut x = Mat::zeros((n, c));
    x.slice_mut(s![..kept.len(), ..]).assign(latents);
    for (j, &cell) in masked.iter().enumerate() {
        if cell / v >= cfg.max_segments {
            return Err(Error::invalid("masked_indices", format!("cell {cell} outside grid")));
        }
        let mut row = x.row_mut(kept.len() + j);
        row.assign(&params.decoder.mask_token);
        row += &params.embed.spatial.row(cell % v);
        row += &params.embed.temporal.row(cell / v);
    }
    let mut blocks = Vec::with_capacity(params.decoder.blocks.len());
    for block in &params.decoder.blocks {
        let (y, cache) = block.forward(&x, cfg.heads);
        blocks.push(cache);
        x = y;
    }
    let (normed, norm) = params.decoder.norm.forward(&x);
    let normed_masked = normed.slice(s![kept.len().., ..]).to_owned();
    let pred = params.decoder.head.forward(&normed_masked);
    Ok((
        pred,
        DecoderCache {
            blocks,
            norm,
            normed_masked,
            kept_count: kept.len(),
            masked: masked.to_vec(),
        },
    ))
}

/// Returns the gradient with respect to the latents.
pub fn decoder_backward(params: &ModelParams, cache: &DecoderCache, dpred: &Mat, grad: &mut ModelParams) -> Mat {
    let cfg = &params.config;
    let v = cfg.joints;
    let dmasked = params
        .decoder
        .head
        .backward(&cache.normed_masked, dpred, &mut grad.decoder.head);
    let n = cache.kept_count + cache.masked.len();
    let mut dnormed = Mat::zeros((n, cfg.embed_dim));
    dnormed.slice_mut(s![cache.kept_count.., ..]).assign(&dmasked);
    let mut d = params
        .decoder
        .norm
        .backward(&cache.norm, &dnormed, &mut grad.decoder.norm);
    for (i, block) in params.decoder.blocks.iter().enumerate().rev() {
        d = block.backward(&cache.blocks[i], &d, cfg.heads, &mut grad.decoder.blocks[i]);
    }
    for (j, &cell) in cache.masked.iter().enumerate() {
        let row = d.row(cache.kept_count + j);
        grad.decoder.mask_token += &row;
        let mut sp = grad.embed.spatial.row_mut(cell % v);
        sp += &row;
        let mut tp = grad.embed.temporal.row_mut(cell / v);
        tp += &row;
    }
    d.slice(s![..cache.kept_count, ..]).to_owned()
}

/// Batch form of [`decoder_forward`]: one `(K, l * C_s)` matrix per sample.
pub fn decode_with_mask_tokens(latents: &TokenBatch, masked: &[Vec<usize>], params: &ModelParams) -> Result<Vec<Mat>> {
    if masked.len() != latents.len() {
        return Err(Error::shape("mask sets", latents.len(), masked.len()));
    }
    latents
        .values
        .iter()
        .zip(&latents.cells)
        .zip(masked)
        .map(|((x, kept), m)| decoder_forward(params, x, kept, m).map(|(p, _)| p))
        .collect()
}

/// Mean over the token axis, one row per sample.
pub fn mean_pool(tokens: &TokenBatch) -> Result<Mat> {
    let c = tokens.values.first().map(|m| m.ncols()).unwrap_or(0);
    let mut out = Mat::zeros((tokens.len(), c));
    for (i, m) in tokens.values.iter().enumerate() {
        if m.nrows() == 0 {
            return Err(Error::invalid("tokens", format!("sample {i} has no tokens")));
        }
        out.row_mut(i).assign(&m.mean_axis(Axis(0)).expect("nonempty"));
    }
    Ok(out)
}

/// Full-grid forward used for features: embed every cell, encode, pool.
pub fn pooled_features(seg: &SegmentedSequence, params: &ModelParams) -> Result<ndarray::Array1<f64>> {
    let x = embed_sequence(seg, params)?;
    let (y, _) = encoder_forward(params, &x);
    Ok(y.mean_axis(Axis(0)).expect("nonempty grid"))
}
