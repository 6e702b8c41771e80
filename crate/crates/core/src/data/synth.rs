//! Procedural action dataset.
//!
//! Each class is a family of per-joint sinusoidal trajectories around a shared
//! rest pose, with class-specific amplitude, frequency, phase and drift. Each
//! sample perturbs body shape (per-joint rest offsets), body scale, heading
//! (rotation about the vertical axis), phase and amplitude, overlays its own
//! class-independent motion and adds Gaussian noise. Static pose therefore
//! says little about the class; the motion pattern carries it. Sample `i` draws from its own
//! stream keyed by `(seed, i)`, so output does not depend on generation order.

use std::collections::BTreeMap;
use std::f64::consts::TAU;

use ndarray::{Array1, Array2, Array3};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::augment::{apply_linear, rotation_matrix};
use super::manifest::{Dataset, DatasetManifest, ManifestEntry, Split};
use super::sequence::SkeletonSequence;
use crate::error::{Error, Result};
use crate::rng::{self, purpose};

/// Name of the split protocol written by the generator.
pub const SYNTH_PROTOCOL: &str = "holdout";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub classes: usize,
    pub per_class: usize,
    pub frames: usize,
    pub joints: usize,
    /// Trailing samples of each class assigned to the test side of the split.
    pub test_per_class: usize,
    pub noise_std: f64,
    pub scale_jitter: f64,
    pub rotation_jitter_deg: f64,
    pub phase_jitter: f64,
    pub amplitude_jitter: f64,
    /// Standard deviation of per-sample rest-pose offsets.
    pub pose_jitter: f64,
    /// Amplitude bound of the per-sample class-independent motion.
    pub nuisance_amplitude: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            classes: 5,
            per_class: 20,
            frames: 120,
            joints: 25,
            test_per_class: 0,
            noise_std: 0.02,
            scale_jitter: 0.15,
            rotation_jitter_deg: 30.0,
            phase_jitter: 1.0,
            amplitude_jitter: 0.3,
            pose_jitter: 0.08,
            nuisance_amplitude: 0.1,
        }
    }
}

impl SynthConfig {
    /// Same structure with every per-sample perturbation disabled.
    pub fn noiseless(mut self) -> Self {
        self.noise_std = 0.0;
        self.scale_jitter = 0.0;
        self.rotation_jitter_deg = 0.0;
        self.phase_jitter = 0.0;
        self.amplitude_jitter = 0.0;
        self.pose_jitter = 0.0;
        self.nuisance_amplitude = 0.0;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::invalid("classes", format!("{} < 2", self.classes)));
        }
        if self.per_class < 2 {
            return Err(Error::invalid("per_class", format!("{} < 2", self.per_class)));
        }
        if self.frames < 2 || self.joints < 1 {
            return Err(Error::invalid(
                "shape",
                format!("frames {} / joints {}", self.frames, self.joints),
            ));
        }
        if self.test_per_class >= self.per_class {
            return Err(Error::invalid(
                "test_per_class",
                format!("{} leaves no training samples", self.test_per_class),
            ));
        }
        let jitters = [
            self.noise_std,
            self.scale_jitter,
            self.rotation_jitter_deg,
            self.phase_jitter,
            self.amplitude_jitter,
            self.pose_jitter,
            self.nuisance_amplitude,
        ];
        if jitters.iter().any(|x| !(x.is_finite() && *x >= 0.0)) || self.scale_jitter >= 1.0 {
            return Err(Error::invalid(
                "perturbation",
                "magnitudes must be finite, >= 0, scale < 1",
            ));
        }
        Ok(())
    }
}

/// Lateral joint pairs of the synthetic skeleton: `(1, 2), (3, 4), ...`.
pub fn synthetic_pairs(joints: usize) -> Vec<(usize, usize)> {
    (1..joints.saturating_sub(1)).step_by(2).map(|a| (a, a + 1)).collect()
}

struct ClassTemplate {
    amplitude: Array2<f64>, // (V, 3)
    phase: Array2<f64>,     // (V, 3)
    cycles: Array1<f64>,    // (V,)
    drift: [f64; 3],
}

fn rest_pose<R: Rng + ?Sized>(joints: usize, rng: &mut R) -> Array2<f64> {
    let mut pose = Array2::zeros((joints, 3));
    pose[[0, 1]] = 1.0;
    for (a, b) in synthetic_pairs(joints) {
        let x = rng.random_range(0.1..0.5);
        let y = rng.random_range(0.0..2.0);
        let z = rng.random_range(-0.2..0.2);
        pose.row_mut(a).assign(&ndarray::arr1(&[x, y, z]));
        pose.row_mut(b).assign(&ndarray::arr1(&[-x, y, z]));
    }
    if joints > 1 && joints.is_multiple_of(2) {
        pose[[joints - 1, 1]] = rng.random_range(0.0..2.0);
    }
    pose
}

fn class_template<R: Rng + ?Sized>(joints: usize, rng: &mut R) -> ClassTemplate {
    // A few "active" joints carry most of the motion, as in real actions.
    let amplitude = Array2::from_shape_fn((joints, 3), |_| {
        let active = rng.random_bool(0.35);
        rng.random_range(0.0..if active { 0.5 } else { 0.08 })
    });
    let phase = Array2::from_shape_fn((joints, 3), |_| rng.random_range(0.0..TAU));
    let cycles = Array1::from_shape_fn(joints, |_| rng.random_range(1..=3) as f64);
    let drift = [
        rng.random_range(-0.3..0.3),
        rng.random_range(-0.1..0.1),
        rng.random_range(-0.3..0.3),
    ];
    ClassTemplate {
        amplitude,
        phase,
        cycles,
        drift,
    }
}

/// Generates `classes * per_class` labelled sequences, class-major order.
pub fn generate_synthetic(config: &SynthConfig, seed: u64) -> Result<Dataset> {
    config.validate()?;
    let (t_len, joints) = (config.frames, config.joints);
    let mut shared = rng::stream(&[seed, purpose::SYNTH, u64::MAX]);
    let pose = rest_pose(joints, &mut shared);
    let templates: Vec<ClassTemplate> = (0..config.classes)
        .map(|_| class_template(joints, &mut shared))
        .collect();
    let noise = Normal::new(0.0, config.noise_std.max(f64::MIN_POSITIVE)).expect("valid std");

    let mut sequences = Vec::with_capacity(config.classes * config.per_class);
    let mut entries = Vec::with_capacity(sequences.capacity());
    let mut split = Split::default();
    for (label, tpl) in templates.iter().enumerate() {
        for k in 0..config.per_class {
            let index = label * config.per_class + k;
            let mut rng = rng::stream(&[seed, purpose::SYNTH, index as u64]);
            let mut jitter = |b: f64| if b > 0.0 { rng.random_range(-b..=b) } else { 0.0 };
            let scale = 1.0 + jitter(config.scale_jitter);
            let heading = jitter(config.rotation_jitter_deg).to_radians();
            let shift = jitter(config.phase_jitter);
            let amp_scale = 1.0 + jitter(config.amplitude_jitter);
            let body = Array2::from_shape_fn((joints, 3), |_| {
                if config.pose_jitter > 0.0 {
                    config.pose_jitter * rng.sample::<f64, _>(rand_distr::StandardNormal)
                } else {
                    0.0
                }
            });
            let own = if config.nuisance_amplitude > 0.0 {
                let mut t = class_template(joints, &mut rng);
                t.amplitude *= config.nuisance_amplitude / 0.5;
                Some(t)
            } else {
                None
            };

            let mut frames = Array3::zeros((t_len, joints, 3));
            for t in 0..t_len {
                let u = t as f64 / t_len as f64;
                for v in 0..joints {
                    for c in 0..3 {
                        let wave = (TAU * tpl.cycles[v] * u + tpl.phase[[v, c]] + shift).sin();
                        let extra = own.as_ref().map_or(0.0, |o| {
                            o.amplitude[[v, c]] * (TAU * o.cycles[v] * u + o.phase[[v, c]]).sin()
                        });
                        frames[[t, v, c]] = pose[[v, c]]
                            + body[[v, c]]
                            + amp_scale * tpl.amplitude[[v, c]] * wave
                            + tpl.drift[c] * u
                            + extra;
                    }
                }
            }
            let mut frames = apply_linear(&frames, &rotation_matrix(0.0, heading, 0.0))?;
            frames.mapv_inplace(|x| x * scale);
            if config.noise_std > 0.0 {
                frames.mapv_inplace(|x| x + noise.sample(&mut rng));
            }
            let id = format!("s{index:05}");
            let entry = ManifestEntry {
                file: format!("{id}.skl"),
                id: id.clone(),
                label,
                subject: (k % 8) as u32,
                view: 0,
            };
            if k >= config.per_class - config.test_per_class {
                split.test.push(id);
            } else {
                split.train.push(id);
            }
            entries.push(entry);
            sequences.push(SkeletonSequence::new(frames)?);
        }
    }
    let mut splits = BTreeMap::new();
    if config.test_per_class > 0 {
        splits.insert(SYNTH_PROTOCOL.to_string(), split);
    }
    Ok(Dataset {
        manifest: DatasetManifest { entries, splits },
        sequences,
    })
}
