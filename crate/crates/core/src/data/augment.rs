//! Optional geometric augmentations. All are off by default.

use ndarray::{Array2, Array3, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::sequence::SkeletonSequence;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugmentKind {
    SpatialFlip,
    Rotation,
    Shear,
    AxisMask,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    /// Per-axis Euler angle bound in degrees.
    pub rotation_max_deg: f64,
    /// Bound on each off-diagonal shear factor.
    pub shear_max: f64,
    /// Left/right joint pairs used by spatial flipping.
    pub flip_pairs: Option<Vec<(usize, usize)>>,
    /// Channel negated by spatial flipping.
    pub lateral_axis: usize,
    /// Transforms applied in order during training; empty disables augmentation.
    pub kinds: Vec<AugmentKind>,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            rotation_max_deg: 30.0,
            shear_max: 0.3,
            flip_pairs: None,
            lateral_axis: 0,
            kinds: Vec::new(),
        }
    }
}

/// Left/right joint pairs of the 25-joint Kinect v2 skeleton (0-based).
pub fn kinect25_pairs() -> Vec<(usize, usize)> {
    vec![
        (4, 8),
        (5, 9),
        (6, 10),
        (7, 11),
        (12, 16),
        (13, 17),
        (14, 18),
        (15, 19),
        (21, 23),
        (22, 24),
    ]
}

pub fn augment<R: Rng + ?Sized>(
    seq: &SkeletonSequence,
    kind: AugmentKind,
    config: &AugmentConfig,
    rng: &mut R,
) -> Result<SkeletonSequence> {
    let frames = seq.frames();
    let out = match kind {
        AugmentKind::SpatialFlip => {
            let pairs = config
                .flip_pairs
                .as_ref()
                .ok_or_else(|| Error::invalid("flip_pairs", "spatial flip needs a joint pair table"))?;
            flip(frames, pairs, config.lateral_axis)?
        }
        AugmentKind::Rotation => {
            let b = config.rotation_max_deg.to_radians();
            let mut draw = || if b > 0.0 { rng.random_range(-b..=b) } else { 0.0 };
            let (ax, ay, az) = (draw(), draw(), draw());
            apply_linear(frames, &rotation_matrix(ax, ay, az))?
        }
        AugmentKind::Shear => {
            let b = config.shear_max;
            let mut m = Array2::eye(3);
            for i in 0..3 {
                for j in 0..3 {
                    if i != j && b > 0.0 {
                        m[[i, j]] = rng.random_range(-b..=b);
                    }
                }
            }
            apply_linear(frames, &m)?
        }
        AugmentKind::AxisMask => {
            let c = seq.num_channels();
            let axis = rng.random_range(0..c);
            let mut out = frames.clone();
            out.index_axis_mut(Axis(2), axis).fill(0.0);
            out
        }
    };
    SkeletonSequence::new(out)
}

/// Applies each configured transform in order.
pub fn augment_all<R: Rng + ?Sized>(
    seq: &SkeletonSequence,
    config: &AugmentConfig,
    rng: &mut R,
) -> Result<SkeletonSequence> {
    let mut cur = seq.clone();
    for &kind in &config.kinds {
        cur = augment(&cur, kind, config, rng)?;
    }
    Ok(cur)
}

fn flip(frames: &Array3<f64>, pairs: &[(usize, usize)], lateral: usize) -> Result<Array3<f64>> {
    let (_, v, c) = frames.dim();
    if lateral >= c {
        return Err(Error::invalid("lateral_axis", format!("{lateral} >= {c} channels")));
    }
    let mut perm: Vec<usize> = (0..v).collect();
    for &(a, b) in pairs {
        if a >= v || b >= v {
            return Err(Error::invalid("flip_pairs", format!("({a}, {b}) outside {v} joints")));
        }
        perm[a] = b;
        perm[b] = a;
    }
    let mut out = frames.select(Axis(1), &perm);
    out.index_axis_mut(Axis(2), lateral).mapv_inplace(|x| -x);
    Ok(out)
}

/// `R = Rz(az) * Ry(ay) * Rx(ax)`.
pub fn rotation_matrix(ax: f64, ay: f64, az: f64) -> Array2<f64> {
    let (sx, cx) = ax.sin_cos();
    let (sy, cy) = ay.sin_cos();
    let (sz, cz) = az.sin_cos();
    let rx = ndarray::arr2(&[[1.0, 0.0, 0.0], [0.0, cx, -sx], [0.0, sx, cx]]);
    let ry = ndarray::arr2(&[[cy, 0.0, sy], [0.0, 1.0, 0.0], [-sy, 0.0, cy]]);
    let rz = ndarray::arr2(&[[cz, -sz, 0.0], [sz, cz, 0.0], [0.0, 0.0, 1.0]]);
    rz.dot(&ry).dot(&rx)
}

/// Applies `x -> M x` to every joint position.
pub(crate) fn apply_linear(frames: &Array3<f64>, m: &Array2<f64>) -> Result<Array3<f64>> {
    let (t, v, c) = frames.dim();
    if c != 3 {
        return Err(Error::shape("linear augmentation", "3 channels", c));
    }
    let flat = frames.to_shape((t * v, 3)).expect("contiguous frames").dot(&m.t());
    Ok(flat.into_shape_with_order((t, v, 3)).expect("same size"))
}
