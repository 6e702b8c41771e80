//! Checkpoint directories: `params.bin` plus `meta.json`.
//!
//! `params.bin` is a sequence of named tensors, each encoded as
//! `u32 name_len | name | u32 rank | u32 dims[rank] | f32 payload`
//! (little-endian). Learnable tensors come first in model order, followed by
//! the projector's running statistics. The content hash in `meta.json` is the
//! SHA-256 of `"blob <len>\0" ++ params.bin`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::model::TensorMut;
use crate::nn::{ModelConfig, ModelParams};

pub const PARAMS_FILE: &str = "params.bin";
pub const META_FILE: &str = "meta.json";

pub const STAGE_INIT: &str = "init";
pub const STAGE_MAMP: &str = "mamp";
pub const STAGE_STARS: &str = "stars";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub stage: String,
    pub config: ModelConfig,
    pub seed: u64,
    pub epoch: usize,
    pub content_hash: String,
    /// Stage-specific records (mode, learning-rate schedule, ...).
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub details: BTreeMap<String, serde_json::Value>,
}

fn push_tensor(out: &mut Vec<u8>, name: &str, shape: &[usize], data: &[f64]) {
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
    for &d in shape {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &x in data {
        out.extend_from_slice(&(x as f32).to_le_bytes());
    }
}

/// Serializes every tensor and buffer.
pub fn encode_params(params: &ModelParams) -> Vec<u8> {
    let mut out = Vec::new();
    for t in params.tensors().iter().chain(params.buffers().iter()) {
        push_tensor(&mut out, &t.name, &t.shape, t.data);
    }
    out
}

/// Name, shape and values of one stored tensor.
pub type StoredTensor = (String, Vec<usize>, Vec<f32>);

/// Named tensors as stored in `params.bin`.
pub fn decode_tensors(bytes: &[u8]) -> Result<Vec<StoredTensor>> {
    let parse = |field, detail: String| Error::Parse {
        format: "params.bin",
        field,
        detail,
    };
    let mut at = 0usize;
    let take = |at: &mut usize, n: usize, field: &'static str| -> Result<&[u8]> {
        let start = *at;
        let end = start
            .checked_add(n)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| parse(field, format!("truncated at byte {start}")))?;
        *at = end;
        Ok(&bytes[start..end])
    };
    let mut out = Vec::new();
    while at < bytes.len() {
        let u32_of = |b: &[u8]| u32::from_le_bytes(b.try_into().unwrap()) as usize;
        let name_len = u32_of(take(&mut at, 4, "name length")?);
        let name =
            String::from_utf8(take(&mut at, name_len, "name")?.to_vec()).map_err(|e| parse("name", e.to_string()))?;
        let rank = u32_of(take(&mut at, 4, "rank")?);
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u32_of(take(&mut at, 4, "dims")?));
        }
        let count: usize = shape.iter().product();
        let payload = take(&mut at, count * 4, "payload")?;
        let values = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        out.push((name, shape, values));
    }
    Ok(out)
}

/// Loads tensors into a freshly shaped parameter set for `config`.
pub fn decode_params(bytes: &[u8], config: &ModelConfig) -> Result<ModelParams> {
    let mut params = ModelParams::init(config, 0)?;
    let mut stored: BTreeMap<String, (Vec<usize>, Vec<f32>)> = decode_tensors(bytes)?
        .into_iter()
        .map(|(n, s, v)| (n, (s, v)))
        .collect();
    let mut fill = |t: crate::nn::model::TensorMut<'_>| -> Result<()> {
        let (shape, values) = stored
            .remove(&t.name)
            .ok_or_else(|| Error::CheckpointMismatch(format!("missing tensor {}", t.name)))?;
        if shape != t.shape {
            return Err(Error::CheckpointMismatch(format!(
                "{}: stored shape {:?}, model expects {:?}",
                t.name, shape, t.shape
            )));
        }
        for (d, s) in t.data.iter_mut().zip(values) {
            *d = s as f64;
        }
        Ok(())
    };
    for t in params.tensors_mut() {
        fill(t)?;
    }
    for t in params.buffers_mut() {
        fill(t)?;
    }
    if let Some(name) = stored.keys().next() {
        return Err(Error::CheckpointMismatch(format!("unexpected tensor {name}")));
    }
    if !params.all_finite() {
        return Err(Error::NonFinite {
            what: "checkpoint tensors",
            index: 0,
        });
    }
    Ok(params)
}

pub fn content_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    hex::encode(h.finalize())
}

/// Writes `params.bin` and `meta.json`; returns the meta with its hash filled.
pub fn save_checkpoint(
    dir: impl AsRef<Path>,
    params: &ModelParams,
    stage: &str,
    seed: u64,
    epoch: usize,
    details: BTreeMap<String, serde_json::Value>,
) -> Result<CheckpointMeta> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let bytes = encode_params(params);
    let meta = CheckpointMeta {
        stage: stage.to_string(),
        config: params.config.clone(),
        seed,
        epoch,
        content_hash: content_hash(&bytes),
        details,
    };
    let path = dir.join(PARAMS_FILE);
    fs::write(&path, &bytes).map_err(|e| Error::io(&path, e))?;
    let path = dir.join(META_FILE);
    fs::write(&path, serde_json::to_string_pretty(&meta)? + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(meta)
}

pub fn load_checkpoint(dir: impl AsRef<Path>) -> Result<(ModelParams, CheckpointMeta)> {
    let dir = dir.as_ref();
    let path = dir.join(META_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let meta: CheckpointMeta = serde_json::from_str(&text)?;
    let path = dir.join(PARAMS_FILE);
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let hash = content_hash(&bytes);
    if hash != meta.content_hash {
        return Err(Error::CheckpointMismatch(format!(
            "params.bin hash {hash} does not match meta {}",
            meta.content_hash
        )));
    }
    let params = decode_params(&bytes, &meta.config)?;
    Ok((params, meta))
}

/// Rounds every tensor to `f32` precision, matching what a save/load cycle
/// produces.
pub fn round_to_storage(params: &mut ModelParams) {
    let round = |t: TensorMut<'_>| t.data.iter_mut().for_each(|x| *x = *x as f32 as f64);
    params.tensors_mut().into_iter().for_each(round);
    params.buffers_mut().into_iter().for_each(round);
}
