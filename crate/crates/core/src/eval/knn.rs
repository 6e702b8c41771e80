use std::collections::BTreeMap;

use ndarray::{Array1, Array2, ArrayView1};
use rayon::prelude::*;

use super::features::FeatureSet;
use crate::error::{Error, Result};

fn norms(m: &Array2<f64>) -> Array1<f64> {
    m.rows()
        .into_iter()
        .map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect()
}

/// Cosine similarity, zero for a zero-norm row.
fn cosine(a: ArrayView1<f64>, na: f64, b: ArrayView1<f64>, nb: f64) -> f64 {
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    let mut dot = 0.0;
    for (x, y) in a.iter().zip(b.iter()) {
        dot += x * y;
    }
    dot / (na * nb)
}

/// Majority vote over the `k` most similar rows. Neighbors with equal
/// similarity are ranked by row index; vote ties go to the larger summed
/// similarity and then to the smaller label.
pub fn knn_predict(train: &Array2<f64>, train_labels: &[usize], test: &Array2<f64>, k: usize) -> Result<Vec<usize>> {
    if k == 0 {
        return Err(Error::invalid("k", "must be >= 1"));
    }
    if train.nrows() == 0 {
        return Err(Error::invalid("train", "feature set is empty"));
    }
    if k > train.nrows() {
        return Err(Error::invalid("k", format!("{k} exceeds train size {}", train.nrows())));
    }
    if train.ncols() != test.ncols() {
        return Err(Error::shape(
            "feature dimension",
            train.ncols().to_string(),
            test.ncols().to_string(),
        ));
    }
    let train_norms = norms(train);
    let test_norms = norms(test);
    Ok((0..test.nrows())
        .into_par_iter()
        .map(|t| {
            let row = test.row(t);
            let mut ranked: Vec<(f64, usize)> = (0..train.nrows())
                .map(|j| (cosine(row, test_norms[t], train.row(j), train_norms[j]), j))
                .collect();
            ranked.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
            let mut votes: BTreeMap<usize, (usize, f64)> = BTreeMap::new();
            for &(sim, j) in &ranked[..k] {
                let v = votes.entry(train_labels[j]).or_insert((0, 0.0));
                v.0 += 1;
                v.1 += sim;
            }
            // BTreeMap iterates labels ascending, so strict improvement keeps the lower label
            let mut best: Option<(usize, usize, f64)> = None;
            for (&label, &(count, sum)) in &votes {
                let better = match best {
                    None => true,
                    Some((_, c, s)) => count > c || (count == c && sum > s),
                };
                if better {
                    best = Some((label, count, sum));
                }
            }
            best.expect("k >= 1").0
        })
        .collect())
}

fn accuracy(pred: &[usize], truth: &[usize]) -> f64 {
    if truth.is_empty() {
        return 0.0;
    }
    pred.iter().zip(truth).filter(|(a, b)| a == b).count() as f64 / truth.len() as f64
}

pub fn knn_eval(train: &FeatureSet, test: &FeatureSet, k: usize) -> Result<f64> {
    let pred = knn_predict(&train.features, &train.labels, &test.features, k)?;
    Ok(accuracy(&pred, &test.labels))
}

/// Vote over the `n` nearest exemplars; every class must have exactly `n`.
pub fn few_shot_eval(exemplars: &FeatureSet, test: &FeatureSet, n: usize) -> Result<f64> {
    if n == 0 {
        return Err(Error::invalid("n", "must be >= 1"));
    }
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for &l in &exemplars.labels {
        *counts.entry(l).or_default() += 1;
    }
    if let Some((label, count)) = counts.iter().find(|(_, &c)| c != n) {
        return Err(Error::invalid(
            "exemplars",
            format!("class {label} has {count} exemplars, expected {n}"),
        ));
    }
    knn_eval(exemplars, test, n)
}

/// First `n` rows of each class in row order.
pub fn select_exemplars(fs: &FeatureSet, n: usize) -> Result<FeatureSet> {
    let mut taken: BTreeMap<usize, usize> = BTreeMap::new();
    let mut rows = Vec::new();
    for (i, &l) in fs.labels.iter().enumerate() {
        let c = taken.entry(l).or_default();
        if *c < n {
            *c += 1;
            rows.push(i);
        }
    }
    if let Some((label, count)) = taken.iter().find(|(_, &c)| c < n) {
        return Err(Error::invalid(
            "n",
            format!("class {label} has only {count} rows, {n} requested"),
        ));
    }
    FeatureSet::new(
        fs.features.select(ndarray::Axis(0), &rows),
        rows.iter().map(|&i| fs.labels[i]).collect(),
        rows.iter().map(|&i| fs.ids[i].clone()).collect(),
        fs.meta.clone(),
    )
}
