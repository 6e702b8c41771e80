//! Run configuration: JSON file, dotted `--set` overrides, seed resolution.

use std::path::Path;

use anyhow::{anyhow, bail, Context};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use stars_core::contrastive::Stage2Config;
use stars_core::data::DataConfig;
use stars_core::eval::EvalConfig;
use stars_core::nn::ModelConfig;
use stars_core::pretrain::Stage1Config;

pub const SEED_ENV: &str = "STARS_SEED";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: DataConfig,
    pub model: ModelConfig,
    pub stage1: Stage1Config,
    pub stage2: Stage2Config,
    pub eval: EvalConfig,
    pub seed: u64,
}

/// A validated configuration. The flags record whether the model and data
/// sections were given explicitly; otherwise commands that read a checkpoint
/// take them from it.
pub struct Resolved {
    pub config: RunConfig,
    pub model_explicit: bool,
    pub data_explicit: bool,
}

fn set_path(root: &mut Value, key: &str, value: Value) -> anyhow::Result<()> {
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = node
            .as_object_mut()
            .ok_or_else(|| anyhow!("`{}` is not a section", parts[..i].join(".")))?;
        if i + 1 == parts.len() {
            if !obj.contains_key(*part) {
                bail!("unknown config key `{key}`");
            }
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        node = obj
            .get_mut(*part)
            .ok_or_else(|| anyhow!("unknown config key `{key}`"))?;
    }
    unreachable!("split yields at least one part")
}

/// Parses `key=value`; the value is read as JSON when possible, else as a string.
pub fn parse_override(item: &str) -> anyhow::Result<(String, Value)> {
    let (key, raw) = item
        .split_once('=')
        .ok_or_else(|| anyhow!("override `{item}` is not key=value"))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    Ok((key.trim().to_string(), value))
}

pub fn resolve(file: Option<&Path>, overrides: &[String], seed_env: Option<String>) -> anyhow::Result<Resolved> {
    let mut model_explicit = false;
    let mut data_explicit = false;
    let base = match file {
        Some(path) => {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
            let raw: Value =
                serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
            model_explicit = raw.get("model").is_some();
            data_explicit = raw.get("data").is_some();
            serde_json::from_value::<RunConfig>(raw).with_context(|| format!("config {}", path.display()))?
        }
        None => RunConfig::default(),
    };
    let mut tree = serde_json::to_value(&base)?;
    for item in overrides {
        let (key, value) = parse_override(item)?;
        model_explicit |= key == "model" || key.starts_with("model.");
        data_explicit |= key == "data" || key.starts_with("data.");
        set_path(&mut tree, &key, value)?;
    }
    let mut config: RunConfig = serde_json::from_value(tree).context("applying overrides")?;
    if let Some(raw) = seed_env {
        config.seed = raw
            .trim()
            .parse()
            .with_context(|| format!("{SEED_ENV}={raw} is not an unsigned integer"))?;
    }
    config.stage1.seed = config.seed;
    config.stage2.seed = config.seed;
    config.eval.probe.seed = config.seed;
    validate(&config)?;
    Ok(Resolved {
        config,
        model_explicit,
        data_explicit,
    })
}

pub fn validate(config: &RunConfig) -> anyhow::Result<()> {
    config.model.validate()?;
    config.data.preprocess.validate(config.model.segment_len)?;
    let segments = config.data.preprocess.target_length / config.model.segment_len;
    if segments > config.model.max_segments {
        bail!(
            "data.preprocess.target_length gives {segments} segments, model.max_segments is {}",
            config.model.max_segments
        );
    }
    config.stage1.validate()?;
    config.stage2.validate()?;
    if config.eval.k == 0 || config.eval.shots == 0 {
        bail!("eval.k and eval.shots must be >= 1");
    }
    let p = &config.eval.probe;
    if p.batch_size == 0 || p.lr.is_nan() || p.lr <= 0.0 {
        bail!("eval.probe.batch_size and eval.probe.lr must be positive");
    }
    Ok(())
}
