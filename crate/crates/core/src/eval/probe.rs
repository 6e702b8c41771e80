use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::features::FeatureSet;
use crate::error::{Error, Result};
use crate::rng::{self, purpose};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub momentum: f64,
    /// Standardize features with training-set statistics.
    pub standardize: bool,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            lr: 0.1,
            batch_size: 256,
            momentum: 0.9,
            standardize: true,
            seed: 0,
        }
    }
}

struct Linear {
    w: Array2<f64>,
    b: Array1<f64>,
}

impl Linear {
    fn logits(&self, x: &Array2<f64>) -> Array2<f64> {
        x.dot(&self.w) + &self.b
    }
}

fn softmax_in_place(z: &mut Array2<f64>) {
    for mut row in z.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let s = row.sum();
        row /= s;
    }
}

/// Softmax classifier on frozen features, momentum SGD with cosine decay
/// of the learning rate to zero. Returns test accuracy.
pub fn linear_probe(train: &FeatureSet, test: &FeatureSet, config: &ProbeConfig) -> Result<f64> {
    if train.is_empty() {
        return Err(Error::invalid("train", "feature set is empty"));
    }
    if train.dim() != test.dim() {
        return Err(Error::shape(
            "feature dimension",
            train.dim().to_string(),
            test.dim().to_string(),
        ));
    }
    if train.labels.iter().all(|&l| l == train.labels[0]) {
        return Err(Error::invalid("train", "labels contain a single class"));
    }
    if config.batch_size == 0 || config.lr.is_nan() || config.lr <= 0.0 {
        return Err(Error::invalid("probe", "batch_size and lr must be positive"));
    }
    let classes = train.labels.iter().chain(&test.labels).max().expect("nonempty") + 1;
    let dim = train.dim();

    let (mean, scale) = if config.standardize {
        let mean = train.features.mean_axis(Axis(0)).expect("nonempty");
        let std = train.features.std_axis(Axis(0), 0.0);
        (mean, std.mapv(|s| if s > 1e-12 { 1.0 / s } else { 1.0 }))
    } else {
        (Array1::zeros(dim), Array1::ones(dim))
    };
    let prep = |x: &Array2<f64>| (x - &mean) * &scale;
    let xtr = prep(&train.features);
    let xte = prep(&test.features);

    let mut model = Linear {
        w: Array2::zeros((dim, classes)),
        b: Array1::zeros(classes),
    };
    let mut vw = Array2::<f64>::zeros((dim, classes));
    let mut vb = Array1::<f64>::zeros(classes);
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..config.epochs {
        let lr = 0.5 * config.lr * (1.0 + (std::f64::consts::PI * epoch as f64 / config.epochs as f64).cos());
        order.shuffle(&mut rng::stream(&[config.seed, purpose::PROBE, epoch as u64]));
        for batch in order.chunks(config.batch_size) {
            let x = xtr.select(Axis(0), batch);
            let mut p = model.logits(&x);
            softmax_in_place(&mut p);
            for (r, &i) in batch.iter().enumerate() {
                p[[r, train.labels[i]]] -= 1.0;
            }
            p /= batch.len() as f64;
            let gw = x.t().dot(&p);
            let gb = p.sum_axis(Axis(0));
            vw = vw * config.momentum + gw;
            vb = vb * config.momentum + gb;
            model.w.scaled_add(-lr, &vw);
            model.b.scaled_add(-lr, &vb);
        }
    }
    if !model.w.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite {
            what: "probe weights",
            index: 0,
        });
    }
    if test.is_empty() {
        return Ok(0.0);
    }
    let logits = model.logits(&xte);
    let correct = logits
        .rows()
        .into_iter()
        .zip(&test.labels)
        .filter(|(row, &label)| {
            // first maximum wins
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best == label
        })
        .count();
    Ok(correct as f64 / test.len() as f64)
}
