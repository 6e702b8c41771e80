//! Motion-aware masking: temporal-difference motion, per-token motion
//! intensity, softmax masking probabilities, and Gumbel-Max top-K selection.

use ndarray::{s, Array2, Array3, ArrayView4, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::SkeletonSequence;
use crate::error::{Error, Result};

const EPS_CLAMP: f64 = 1e-12;

/// Masking hyper-parameters. Defaults (`ratio` 0.9, `temperature` 0.1) are
/// inherited MAMP settings rather than values fixed by this method.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MaskingConfig {
    pub ratio: f64,
    pub temperature: f64,
    /// Ignore motion and mask uniformly at random (ablation baseline).
    pub uniform: bool,
}

impl Default for MaskingConfig {
    fn default() -> Self {
        Self {
            ratio: 0.9,
            temperature: 0.1,
            uniform: false,
        }
    }
}

impl MaskingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.ratio > 0.0 && self.ratio < 1.0) {
            return Err(Error::invalid("mask ratio", format!("{} not in (0, 1)", self.ratio)));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::invalid("tau1", format!("{} must be > 0", self.temperature)));
        }
        Ok(())
    }

    /// `round(ratio * cells)`, kept inside `[1, cells - 1]` so both the masked
    /// and the visible sets are nonempty.
    pub fn mask_count(&self, cells: usize) -> usize {
        let k = (self.ratio * cells as f64).round() as usize;
        k.clamp(1, cells.saturating_sub(1).max(1))
    }
}

/// Temporal-difference motion with the same shape as the source sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct MotionField {
    motion: Array3<f64>,
    stride: usize,
    segment_len: usize,
}

impl MotionField {
    pub fn motion(&self) -> &Array3<f64> {
        &self.motion
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn segment_len(&self) -> usize {
        self.segment_len
    }

    /// Motion viewed as `(T_e, V, l, C)`.
    pub fn reshaped(&self) -> ArrayView4<'_, f64> {
        let (t, v, c) = self.motion.dim();
        let l = self.segment_len;
        self.motion
            .view()
            .into_shape_with_order((t / l, l, v, c))
            .expect("frames divisible by segment length")
            .permuted_axes([0, 2, 1, 3])
    }

    /// Motion of cell `(t, v)` flattened as `l * C` values in (frame, channel)
    /// order, matching the token layout of segmented sequences.
    pub fn cell(&self, t: usize, v: usize) -> Vec<f64> {
        let l = self.segment_len;
        self.motion
            .slice(s![t * l..(t + 1) * l, v, ..])
            .iter()
            .copied()
            .collect()
    }
}

/// `motion[i] = frames[i] - frames[i - stride]` for `i >= stride`; the first
/// `stride` frames replicate `motion[stride]`.
pub fn extract_motion(seq: &SkeletonSequence, stride: usize, segment_len: usize) -> Result<MotionField> {
    let frames = seq.frames();
    let t = seq.num_frames();
    if stride == 0 || stride >= t {
        return Err(Error::invalid("stride", format!("{stride} not in [1, {t})")));
    }
    if segment_len == 0 || !t.is_multiple_of(segment_len) {
        return Err(Error::invalid(
            "segment_len",
            format!("{t} frames not divisible by {segment_len}"),
        ));
    }
    let mut motion = Array3::zeros(frames.raw_dim());
    let diff = &frames.slice(s![stride.., .., ..]) - &frames.slice(s![..t - stride, .., ..]);
    motion.slice_mut(s![stride.., .., ..]).assign(&diff);
    let edge = motion.index_axis(Axis(0), stride).to_owned();
    for i in 0..stride {
        motion.index_axis_mut(Axis(0), i).assign(&edge);
    }
    Ok(MotionField {
        motion,
        stride,
        segment_len,
    })
}

/// Sum of absolute motion over each segment's frames and channels: `(T_e, V)`.
pub fn motion_intensity(field: &MotionField) -> Array2<f64> {
    field.reshaped().mapv(f64::abs).sum_axis(Axis(3)).sum_axis(Axis(2))
}

/// Softmax of `intensity / temperature` over the whole grid.
pub fn mask_probabilities(intensity: &Array2<f64>, temperature: f64) -> Result<Array2<f64>> {
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::invalid("tau1", format!("{temperature} must be > 0")));
    }
    if let Some(index) = intensity.iter().position(|x| !x.is_finite()) {
        return Err(Error::NonFinite {
            what: "motion intensity",
            index,
        });
    }
    let logits = intensity.mapv(|x| x / temperature);
    let max = logits.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
    let mut probs = logits.mapv(|x| (x - max).exp());
    let total = probs.sum();
    probs.mapv_inplace(|p| p / total);
    Ok(probs)
}

/// Masking decision for one sequence, with the noise kept for replay.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskPlan {
    pub intensity: Array2<f64>,
    pub probabilities: Array2<f64>,
    pub temperature: f64,
    /// Uniform draws after clamping to `[1e-12, 1 - 1e-12]`.
    pub uniforms: Array2<f64>,
    pub gumbel: Array2<f64>,
    /// Flat cell indices `t * V + v`, ascending.
    pub masked: Vec<usize>,
}

impl MaskPlan {
    pub fn mask_count(&self) -> usize {
        self.masked.len()
    }

    /// Complement of `masked`, ascending.
    pub fn kept(&self) -> Vec<usize> {
        complement(&self.masked, self.probabilities.len())
    }
}

pub(crate) fn complement(sorted: &[usize], cells: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(cells - sorted.len());
    let mut it = sorted.iter().peekable();
    for i in 0..cells {
        if it.peek() == Some(&&i) {
            it.next();
        } else {
            out.push(i);
        }
    }
    out
}

/// Draws `count` distinct cells: the top-`count` of `log(pi) + g` with
/// `g = -log(-log(eps))`, `eps ~ U[0, 1]`. Returns (sorted indices, clamped
/// uniforms, gumbel noise).
pub fn sample_mask<R: Rng + ?Sized>(
    probabilities: &Array2<f64>,
    count: usize,
    rng: &mut R,
) -> Result<(Vec<usize>, Array2<f64>, Array2<f64>)> {
    let cells = probabilities.len();
    if count == 0 || count > cells {
        return Err(Error::invalid("mask count", format!("{count} not in [1, {cells}]")));
    }
    if let Some(index) = probabilities.iter().position(|p| !(p.is_finite() && *p >= 0.0)) {
        return Err(Error::NonFinite {
            what: "mask probabilities",
            index,
        });
    }
    let uniforms = probabilities.mapv(|_| rng.random::<f64>().clamp(EPS_CLAMP, 1.0 - EPS_CLAMP));
    let gumbel = uniforms.mapv(|e| -(-e.ln()).ln());
    let scores: Vec<f64> = probabilities
        .iter()
        .zip(gumbel.iter())
        .map(|(&p, &g)| p.ln() + g)
        .collect();
    let mut order: Vec<usize> = (0..cells).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut masked = order[..count].to_vec();
    masked.sort_unstable();
    Ok((masked, uniforms, gumbel))
}

/// Full masking pipeline for one sequence: motion, intensity, probabilities,
/// and a Gumbel-Max draw of `config.mask_count(T_e * V)` cells.
pub fn plan_mask<R: Rng + ?Sized>(
    seq: &SkeletonSequence,
    segment_len: usize,
    config: &MaskingConfig,
    rng: &mut R,
) -> Result<(MotionField, MaskPlan)> {
    let field = extract_motion(seq, segment_len, segment_len)?;
    let intensity = motion_intensity(&field);
    let probabilities = if config.uniform {
        Array2::from_elem(intensity.raw_dim(), 1.0 / intensity.len() as f64)
    } else {
        mask_probabilities(&intensity, config.temperature)?
    };
    let count = config.mask_count(intensity.len());
    let (masked, uniforms, gumbel) = sample_mask(&probabilities, count, rng)?;
    Ok((
        field,
        MaskPlan {
            intensity,
            probabilities,
            temperature: config.temperature,
            uniforms,
            gumbel,
            masked,
        },
    ))
}
