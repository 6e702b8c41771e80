//! Network: embedding, transformer encoder/decoder, projector, predictor.

pub mod forward;
pub mod heads;
pub mod layers;
pub mod model;

pub use forward::{decode_with_mask_tokens, embed, encode, mean_pool, pooled_features, TokenBatch};
pub use heads::{l2_normalize_rows, predict, project, Mode};
pub use layers::Mat;
pub use model::{ModelConfig, ModelParams, ParamGroup};
