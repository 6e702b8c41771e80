//! Temporal cropping, resampling, and segmentation into tokens.

use ndarray::{s, Array3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::sequence::SkeletonSequence;
use crate::error::{Error, Result};

/// Crop and resampling settings.
///
/// Training crops draw a proportion uniformly from `[trim_min, trim_max]`
/// with a random start; evaluation crops use `test_trim` centered.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PreprocessConfig {
    pub trim_min: f64,
    pub trim_max: f64,
    pub test_trim: f64,
    pub target_length: usize,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            trim_min: 0.5,
            trim_max: 1.0,
            test_trim: 0.9,
            target_length: 120,
        }
    }
}

impl PreprocessConfig {
    pub fn validate(&self, segment_len: usize) -> Result<()> {
        let ok = |x: f64| x > 0.0 && x <= 1.0;
        if !(ok(self.trim_min) && ok(self.trim_max) && self.trim_min <= self.trim_max) {
            return Err(Error::invalid(
                "trim range",
                format!("need 0 < {} <= {} <= 1", self.trim_min, self.trim_max),
            ));
        }
        if !ok(self.test_trim) {
            return Err(Error::invalid("test_trim", format!("{} not in (0, 1]", self.test_trim)));
        }
        if self.target_length < 2 || segment_len == 0 || !self.target_length.is_multiple_of(segment_len) {
            return Err(Error::invalid(
                "target_length",
                format!(
                    "{} must be >= 2 and divisible by segment length {segment_len}",
                    self.target_length
                ),
            ));
        }
        Ok(())
    }

    /// Training-mode crop: random proportion and random start.
    pub fn train_view<R: Rng + ?Sized>(&self, seq: &SkeletonSequence, rng: &mut R) -> Result<SkeletonSequence> {
        let p = if self.trim_max > self.trim_min {
            rng.random_range(self.trim_min..=self.trim_max)
        } else {
            self.trim_min
        };
        trim_and_resize(seq, p, self.target_length, Some(rng))
    }

    /// Test-mode crop: fixed proportion, centered.
    pub fn test_view(&self, seq: &SkeletonSequence) -> Result<SkeletonSequence> {
        trim_and_resize::<crate::rng::StreamRng>(seq, self.test_trim, self.target_length, None)
    }
}

/// Crops `round(proportion * T)` contiguous frames and resamples them to
/// `target_length` frames by linear interpolation in time with endpoint
/// alignment. The crop start is uniform over valid starts when `rng` is given
/// and centered otherwise.
pub fn trim_and_resize<R: Rng + ?Sized>(
    seq: &SkeletonSequence,
    proportion: f64,
    target_length: usize,
    rng: Option<&mut R>,
) -> Result<SkeletonSequence> {
    if !(proportion > 0.0 && proportion <= 1.0) {
        return Err(Error::invalid("proportion", format!("{proportion} not in (0, 1]")));
    }
    if target_length < 2 {
        return Err(Error::invalid("target_length", format!("{target_length} < 2")));
    }
    let total = seq.num_frames();
    let len = ((proportion * total as f64).round() as usize).min(total);
    if len < 2 {
        return Err(Error::invalid(
            "proportion",
            format!("crop of {proportion} x {total} frames leaves {len} < 2 frames"),
        ));
    }
    let slack = total - len;
    let start = match rng {
        Some(rng) if slack > 0 => rng.random_range(0..=slack),
        Some(_) => 0,
        None => slack / 2,
    };
    let crop = seq.frames().slice(s![start..start + len, .., ..]);
    let (_, v, c) = seq.frames().dim();
    let mut out = Array3::zeros((target_length, v, c));
    let scale = (len - 1) as f64 / (target_length - 1) as f64;
    for j in 0..target_length {
        let pos = if len == target_length {
            j as f64
        } else {
            j as f64 * scale
        };
        let lo = (pos.floor() as usize).min(len - 1);
        let hi = (lo + 1).min(len - 1);
        let w = pos - lo as f64;
        let a = crop.slice(s![lo, .., ..]);
        let b = crop.slice(s![hi, .., ..]);
        let mut dst = out.slice_mut(s![j, .., ..]);
        ndarray::Zip::from(&mut dst)
            .and(&a)
            .and(&b)
            .for_each(|d, &a, &b| *d = if w == 0.0 { a } else { a + w * (b - a) });
    }
    SkeletonSequence::new(out)
}

/// Non-overlapping temporal segments: tokens of shape `(T / l, V, l * C)`.
#[derive(Clone, Debug, PartialEq)]
pub struct SegmentedSequence {
    tokens: Array3<f64>,
    segment_len: usize,
}

impl SegmentedSequence {
    pub fn tokens(&self) -> &Array3<f64> {
        &self.tokens
    }

    pub fn segment_len(&self) -> usize {
        self.segment_len
    }

    pub fn num_segments(&self) -> usize {
        self.tokens.dim().0
    }

    pub fn num_joints(&self) -> usize {
        self.tokens.dim().1
    }

    /// Token feature width `l * C`.
    pub fn token_dim(&self) -> usize {
        self.tokens.dim().2
    }
}

/// `tokens[t, v]` concatenates frames `l*t .. l*t + l - 1` of joint `v`.
pub fn segment(seq: &SkeletonSequence, segment_len: usize) -> Result<SegmentedSequence> {
    let (t, v, c) = seq.frames().dim();
    if segment_len == 0 || t % segment_len != 0 {
        return Err(Error::invalid(
            "segment_len",
            format!("{t} frames not divisible by {segment_len}; resize the sequence first"),
        ));
    }
    let te = t / segment_len;
    let mut tokens = Array3::zeros((te, v, segment_len * c));
    for ((i, j, k), &x) in seq.frames().indexed_iter() {
        tokens[[i / segment_len, j, (i % segment_len) * c + k]] = x;
    }
    Ok(SegmentedSequence { tokens, segment_len })
}

/// Inverse of [`segment`].
pub fn unsegment(seg: &SegmentedSequence) -> Result<SkeletonSequence> {
    let (te, v, lc) = seg.tokens.dim();
    let l = seg.segment_len;
    let c = lc / l;
    let mut frames = Array3::zeros((te * l, v, c));
    for ((t, j, k), &x) in seg.tokens.indexed_iter() {
        frames[[t * l + k / c, j, k % c]] = x;
    }
    SkeletonSequence::new(frames)
}
