//! Model configuration and the full parameter set of both stages.

use ndarray::{Array, Array1, Dimension};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layers::{trunc_normal, Block, LayerNorm, Linear, Mat};
use crate::error::{Error, Result};
use crate::rng::{self, purpose};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub embed_dim: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub heads: usize,
    pub ffn_hidden: usize,
    pub segment_len: usize,
    pub predictor_hidden: usize,
    pub joints: usize,
    pub max_segments: usize,
    pub channels: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            embed_dim: 256,
            encoder_layers: 8,
            decoder_layers: 5,
            heads: 8,
            ffn_hidden: 1024,
            segment_len: 4,
            predictor_hidden: 4096,
            joints: 25,
            max_segments: 30,
            channels: 3,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("embed_dim", self.embed_dim),
            ("encoder_layers", self.encoder_layers),
            ("decoder_layers", self.decoder_layers),
            ("heads", self.heads),
            ("ffn_hidden", self.ffn_hidden),
            ("segment_len", self.segment_len),
            ("predictor_hidden", self.predictor_hidden),
            ("joints", self.joints),
            ("max_segments", self.max_segments),
            ("channels", self.channels),
        ];
        for (name, value) in counts {
            if value == 0 {
                return Err(Error::invalid(name, "must be >= 1"));
            }
        }
        if !self.embed_dim.is_multiple_of(self.heads) {
            return Err(Error::invalid(
                "heads",
                format!("embed_dim {} not divisible by {}", self.embed_dim, self.heads),
            ));
        }
        Ok(())
    }

    /// Width of one token: `segment_len * channels`.
    pub fn token_dim(&self) -> usize {
        self.segment_len * self.channels
    }

    /// Closed-form count of learnable scalars (running statistics excluded).
    pub fn parameter_count(&self) -> usize {
        let (c, f) = (self.embed_dim, self.ffn_hidden);
        let block = 4 * c * c + 2 * c * f + 9 * c + f;
        let embed = self.token_dim() * c + c + (self.joints + self.max_segments) * c;
        let encoder = self.encoder_layers * block + 2 * c;
        let decoder = c + self.decoder_layers * block + 2 * c + c * self.token_dim() + self.token_dim();
        let projector = 2 * c;
        let predictor = 2 * c * self.predictor_hidden + self.predictor_hidden + c;
        embed + encoder + decoder + projector + predictor
    }
}

/// Linear token projection plus learnable spatial (per joint) and temporal
/// (per segment) position tables.
#[derive(Clone, Debug, PartialEq)]
pub struct Embedding {
    pub proj: Linear,
    pub spatial: Mat,
    pub temporal: Mat,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Decoder {
    pub mask_token: Array1<f64>,
    pub blocks: Vec<Block>,
    pub norm: LayerNorm,
    pub head: Linear,
}

/// Affine part of the projector's batch normalization.
#[derive(Clone, Debug, PartialEq)]
pub struct Projector {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
}

/// Running statistics of the projector's batch normalization.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormStats {
    pub running_mean: Array1<f64>,
    pub running_var: Array1<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Predictor {
    pub fc1: Linear,
    pub fc2: Linear,
}

/// Every tensor of the encoder, the stage-1 decoder and the stage-2 heads.
/// Gradients reuse the same type.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub embed: Embedding,
    pub encoder: Vec<Block>,
    pub encoder_norm: LayerNorm,
    pub decoder: Decoder,
    pub projector: Projector,
    pub predictor: Predictor,
    pub bn_stats: BatchNormStats,
}

/// Which part of the network a tensor belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Embedding,
    /// Encoder layer, 1-based. The final encoder norm belongs to the last layer.
    Encoder(usize),
    Decoder,
    Projector,
    Predictor,
}

impl ParamGroup {
    /// Layer index for depth-wise learning rates: the embedding shares layer 1.
    pub fn encoder_layer(self) -> Option<usize> {
        match self {
            ParamGroup::Embedding => Some(1),
            ParamGroup::Encoder(i) => Some(i),
            _ => None,
        }
    }
}

pub struct TensorRef<'a> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a [f64],
}

pub struct TensorMut<'a> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a mut [f64],
}

pub(crate) trait ParamTree {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<TensorRef<'a>>);
    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<TensorMut<'a>>);
}

impl<D: Dimension> ParamTree for Array<f64, D> {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<TensorRef<'a>>) {
        out.push(TensorRef {
            name: prefix.to_string(),
            shape: self.shape().to_vec(),
            data: self.as_slice().expect("standard layout"),
        });
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<TensorMut<'a>>) {
        let shape = self.shape().to_vec();
        out.push(TensorMut {
            name: prefix.to_string(),
            shape,
            data: self.as_slice_mut().expect("standard layout"),
        });
    }
}

impl<T: ParamTree> ParamTree for Vec<T> {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<TensorRef<'a>>) {
        for (i, item) in self.iter().enumerate() {
            item.collect(&format!("{prefix}.{i}"), out);
        }
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<TensorMut<'a>>) {
        for (i, item) in self.iter_mut().enumerate() {
            item.collect_mut(&format!("{prefix}.{i}"), out);
        }
    }
}

macro_rules! param_tree {
    ($ty:ty { $($field:ident),* }) => {
        impl ParamTree for $ty {
            fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<TensorRef<'a>>) {
                $( self.$field.collect(&join(prefix, stringify!($field)), out); )*
            }
            fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<TensorMut<'a>>) {
                $( self.$field.collect_mut(&join(prefix, stringify!($field)), out); )*
            }
        }
    };
}

fn join(prefix: &str, field: &str) -> String {
    if prefix.is_empty() {
        field.to_string()
    } else {
        format!("{prefix}.{field}")
    }
}

param_tree!(Linear { weight, bias });
param_tree!(LayerNorm { gamma, beta });
param_tree!(super::layers::Attention { qkv, proj });
param_tree!(Block {
    norm1,
    attn,
    norm2,
    fc1,
    fc2
});
param_tree!(Embedding {
    proj,
    spatial,
    temporal
});
param_tree!(Decoder {
    mask_token,
    blocks,
    norm,
    head
});
param_tree!(Projector { gamma, beta });
param_tree!(Predictor { fc1, fc2 });
param_tree!(BatchNormStats {
    running_mean,
    running_var
});

impl ModelParams {
    /// Fresh initialization drawn from the stream keyed by `seed`.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng::stream(&[seed, purpose::INIT]);
        Ok(Self::init_with(config, &mut rng))
    }

    fn init_with<R: Rng + ?Sized>(config: &ModelConfig, rng: &mut R) -> Self {
        let (c, f) = (config.embed_dim, config.ffn_hidden);
        let embed = Embedding {
            proj: Linear::init(config.token_dim(), c, rng),
            spatial: trunc_normal((config.joints, c), 0.02, rng),
            temporal: trunc_normal((config.max_segments, c), 0.02, rng),
        };
        let encoder = (0..config.encoder_layers).map(|_| Block::init(c, f, rng)).collect();
        let decoder = Decoder {
            mask_token: trunc_normal((1, c), 0.02, rng).into_shape_with_order(c).unwrap(),
            blocks: (0..config.decoder_layers).map(|_| Block::init(c, f, rng)).collect(),
            norm: LayerNorm::new(c),
            head: Linear::init(c, config.token_dim(), rng),
        };
        let predictor = Predictor {
            fc1: Linear::init(c, config.predictor_hidden, rng),
            fc2: Linear::init(config.predictor_hidden, c, rng),
        };
        Self {
            config: config.clone(),
            embed,
            encoder,
            encoder_norm: LayerNorm::new(c),
            decoder,
            projector: Projector {
                gamma: Array1::ones(c),
                beta: Array1::zeros(c),
            },
            predictor,
            bn_stats: BatchNormStats {
                running_mean: Array1::zeros(c),
                running_var: Array1::ones(c),
            },
        }
    }

    /// All-zero parameters of the same shapes (gradient accumulator).
    pub fn zeros_like(&self) -> Self {
        let mut out = self.clone();
        for t in out.tensors_mut() {
            t.data.fill(0.0);
        }
        out.bn_stats.running_mean.fill(0.0);
        out.bn_stats.running_var.fill(0.0);
        out
    }

    /// Learnable tensors in a fixed order.
    pub fn tensors(&self) -> Vec<TensorRef<'_>> {
        let mut out = Vec::new();
        self.embed.collect("embed", &mut out);
        self.encoder.collect("encoder", &mut out);
        self.encoder_norm.collect("encoder_norm", &mut out);
        self.decoder.collect("decoder", &mut out);
        self.projector.collect("projector", &mut out);
        self.predictor.collect("predictor", &mut out);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<TensorMut<'_>> {
        let mut out = Vec::new();
        self.embed.collect_mut("embed", &mut out);
        self.encoder.collect_mut("encoder", &mut out);
        self.encoder_norm.collect_mut("encoder_norm", &mut out);
        self.decoder.collect_mut("decoder", &mut out);
        self.projector.collect_mut("projector", &mut out);
        self.predictor.collect_mut("predictor", &mut out);
        out
    }

    /// Non-learnable state (batch-norm running statistics).
    pub fn buffers(&self) -> Vec<TensorRef<'_>> {
        let mut out = Vec::new();
        self.bn_stats.collect("projector_stats", &mut out);
        out
    }

    pub fn buffers_mut(&mut self) -> Vec<TensorMut<'_>> {
        let mut out = Vec::new();
        self.bn_stats.collect_mut("projector_stats", &mut out);
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|t| t.data.len()).sum()
    }

    /// Adds `scale * other` to every learnable tensor.
    pub fn add_scaled(&mut self, other: &ModelParams, scale: f64) {
        for (dst, src) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (d, s) in dst.data.iter_mut().zip(src.data) {
                *d += scale * s;
            }
        }
    }

    pub fn sum_squares(&self) -> f64 {
        self.tensors().iter().flat_map(|t| t.data.iter()).map(|x| x * x).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors()
            .iter()
            .chain(self.buffers().iter())
            .all(|t| t.data.iter().all(|x| x.is_finite()))
    }
}

/// Group of a tensor from its name.
pub fn param_group(name: &str) -> ParamGroup {
    let mut parts = name.split('.');
    match parts.next() {
        Some("embed") => ParamGroup::Embedding,
        Some("encoder") => {
            let i: usize = parts
                .next()
                .and_then(|s| s.parse().ok())
                .expect("encoder tensor names carry a layer index");
            ParamGroup::Encoder(i + 1)
        }
        Some("encoder_norm") => ParamGroup::Encoder(usize::MAX),
        Some("decoder") => ParamGroup::Decoder,
        Some("projector") | Some("projector_stats") => ParamGroup::Projector,
        Some("predictor") => ParamGroup::Predictor,
        _ => panic!("unknown tensor name {name}"),
    }
}

impl ModelParams {
    /// Group of a tensor, resolving the final encoder norm to layer N.
    pub fn group_of(&self, name: &str) -> ParamGroup {
        match param_group(name) {
            ParamGroup::Encoder(usize::MAX) => ParamGroup::Encoder(self.config.encoder_layers),
            g => g,
        }
    }
}
