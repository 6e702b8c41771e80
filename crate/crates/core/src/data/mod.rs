//! Sequence I/O, preprocessing, augmentation, and the synthetic generator.

pub mod augment;
pub mod manifest;
pub mod preprocess;
pub mod sequence;
pub mod synth;

pub use augment::{augment, augment_all, kinect25_pairs, AugmentConfig, AugmentKind};
pub use manifest::{Dataset, DatasetManifest, ManifestEntry, Split};
pub use preprocess::{segment, trim_and_resize, unsegment, PreprocessConfig, SegmentedSequence};
pub use sequence::{load_sequence, write_sequence, SkeletonSequence};
pub use synth::{generate_synthetic, synthetic_pairs, SynthConfig, SYNTH_PROTOCOL};

use serde::{Deserialize, Serialize};

/// Input-side settings shared by both training stages.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub preprocess: PreprocessConfig,
    pub augment: AugmentConfig,
}
