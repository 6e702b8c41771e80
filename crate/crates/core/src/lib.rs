//! Two-stage self-supervised representation learning for skeleton sequences.
//!
//! Stage 1 pretrains a transformer encoder by predicting temporal-difference
//! motion at masked spatio-temporal tokens, where masked tokens are drawn by
//! a Gumbel-Max top-K over motion-intensity probabilities. Stage 2 tunes the
//! upper half of the encoder together with a batch-norm projector and an MLP
//! predictor under a nearest-neighbor contrastive loss against a FIFO support
//! queue. The evaluation harness provides KNN, few-shot, and linear-probe
//! protocols on pooled encoder features.

pub mod checkpoint;
pub mod contrastive;
pub mod data;
pub mod error;
pub mod eval;
pub mod masking;
pub mod nn;
pub mod optim;
pub mod pretrain;
pub mod rng;

pub use error::{Error, Result};
