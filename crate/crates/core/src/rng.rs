//! Deterministic random streams.
//!
//! Every random draw in the pipeline comes from a ChaCha stream keyed by a
//! tuple of integers (global seed, purpose, sample index, epoch, ...). Results
//! therefore do not depend on how work is split across threads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a sequence of keys into one 64-bit seed.
pub fn mix(keys: &[u64]) -> u64 {
    keys.iter()
        .fold(0x5354_4152_535F_5345, |acc, &k| splitmix64(acc ^ splitmix64(k)))
}

/// Returns an independent stream for the given key path.
pub fn stream(keys: &[u64]) -> StreamRng {
    ChaCha8Rng::seed_from_u64(mix(keys))
}

/// Purpose tags used as the second key of a stream path.
pub mod purpose {
    pub const INIT: u64 = 1;
    pub const SYNTH: u64 = 2;
    pub const STAGE1_BATCH: u64 = 3;
    pub const STAGE1_ORDER: u64 = 4;
    pub const STAGE2_ORDER: u64 = 5;
    pub const STAGE2_VIEW: u64 = 6;
    pub const PROBE: u64 = 7;
}
