//! Acceptance suite. Each criterion prints one PASS/FAIL line; the process
//! exits non-zero if any fails. Pass criterion numbers as arguments to run a
//! subset, e.g. `cargo test --test acceptance -- 3 7`.

// `ensure!(x <= bound)` must fail on NaN, which `!(x <= bound)` does.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::collections::{BTreeMap, VecDeque};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use ndarray::{Array1, Array2, Array3};
use proptest::prelude::*;
use proptest::test_runner::{Config as PropConfig, TestCaseError, TestRunner};
use rand::Rng;
use stars_core::checkpoint::{self, decode_tensors};
use stars_core::contrastive::tune::{stage2_backward, stage2_forward};
use stars_core::contrastive::{
    build_tune_schedule, nearest_neighbor, nnclr_loss, train_stage2, Stage2Config, SupportQueue, TuneMode,
};
use stars_core::data::{
    generate_synthetic, load_sequence, segment, unsegment, write_sequence, DataConfig, Dataset, PreprocessConfig,
    SkeletonSequence, SynthConfig, SYNTH_PROTOCOL,
};
use stars_core::eval::{
    extract_features, few_shot_eval, knn_eval, knn_predict, read_features, write_features, FeatureMeta, FeatureSet,
};
use stars_core::masking::{sample_mask, MaskingConfig};
use stars_core::nn::{Mat, ModelConfig, ModelParams, ParamGroup};
use stars_core::pretrain::{batch_loss_and_grad, build_stage1_batch, mamp_loss, train_stage1, Stage1Config};
use stars_core::rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

type Check = Result<String, String>;
type Criterion = (usize, &'static str, Duration, fn() -> Check);

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn main() {
    let filter: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let criteria: [Criterion; 10] = [
        (
            1,
            "layer-wise learning-rate schedule",
            Duration::from_secs(5),
            schedule_oracle,
        ),
        (2, "masking marginals", Duration::from_secs(30), masking_marginals),
        (3, "gradient checks", Duration::from_secs(120), gradient_checks),
        (
            4,
            "degenerate loss identities",
            Duration::from_secs(5),
            degenerate_losses,
        ),
        (5, "overfit oracle", Duration::from_secs(600), overfit_oracle),
        (
            6,
            "directional stage-2 check",
            Duration::from_secs(1200),
            directional_check,
        ),
        (7, "freeze invariant", Duration::from_secs(300), freeze_invariant),
        (8, "oracle equivalences", Duration::from_secs(120), oracle_equivalences),
        (
            9,
            "pipeline determinism",
            Duration::from_secs(600),
            pipeline_determinism,
        ),
        (10, "round trips", Duration::from_secs(120), round_trips),
    ];
    let mut failed = Vec::new();
    for (id, name, budget, f) in criteria {
        if !filter.is_empty() && !filter.contains(&id) {
            continue;
        }
        let started = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            Err(format!("panicked: {msg}"))
        });
        let elapsed = started.elapsed();
        let outcome = match outcome {
            Ok(detail) if elapsed > budget => Err(format!("{detail}; over budget {budget:?}")),
            other => other,
        };
        let (tag, detail) = match &outcome {
            Ok(d) => ("PASS", d),
            Err(d) => ("FAIL", d),
        };
        println!("[{tag}] {id:>2}. {name} ({:.1}s): {detail}", elapsed.as_secs_f64());
        if outcome.is_err() {
            failed.push(id);
        }
    }
    if failed.is_empty() {
        println!("acceptance: all selected criteria passed");
    } else {
        println!("acceptance: failed criteria {failed:?}");
        std::process::exit(1);
    }
}

// ---------------------------------------------------------------- 1

fn schedule_oracle() -> Check {
    let s = build_tune_schedule(0.001, 0.2, 8, true).map_err(err)?;
    let expected = vec![0.0, 0.0, 0.0, 0.0, 8e-6, 4e-5, 2e-4, 1e-3];
    ensure!(s.layer_lrs == expected, "got {:?}", s.layer_lrs);
    Ok(format!("{:?}", s.layer_lrs))
}

// ---------------------------------------------------------------- 2

fn masking_marginals() -> Check {
    let pi = [0.05, 0.1, 0.12, 0.18, 0.25, 0.3];
    let probs = Array2::from_shape_vec((2, 3), pi.to_vec()).map_err(err)?;
    let draws = 100_000usize;
    let mut rng = rng::stream(&[2024, 2]);
    let mut counts = [0usize; 6];
    for _ in 0..draws {
        let (masked, _, _) = sample_mask(&probs, 1, &mut rng).map_err(err)?;
        counts[masked[0]] += 1;
    }
    let n = draws as f64;
    let mut chi2 = 0.0;
    for (i, (&c, &p)) in counts.iter().zip(&pi).enumerate() {
        let se = (p * (1.0 - p) / n).sqrt();
        let freq = c as f64 / n;
        ensure!(
            (freq - p).abs() <= 3.0 * se,
            "cell {i}: {freq:.5} vs {p} (3 SE = {:.5})",
            3.0 * se
        );
        chi2 += (c as f64 - n * p).powi(2) / (n * p);
    }
    let p_value = 1.0 - ChiSquared::new(5.0).map_err(err)?.cdf(chi2);
    ensure!(p_value >= 0.01, "chi-square {chi2:.3}, p = {p_value:.4}");
    Ok(format!(
        "chi-square {chi2:.3} (df 5), p = {p_value:.3}, counts {counts:?}"
    ))
}

// ---------------------------------------------------------------- 3

fn tiny_model() -> ModelConfig {
    ModelConfig {
        embed_dim: 8,
        encoder_layers: 2,
        decoder_layers: 1,
        heads: 2,
        ffn_hidden: 16,
        segment_len: 2,
        predictor_hidden: 8,
        joints: 2,
        max_segments: 2,
        channels: 3,
    }
}

/// Per-tensor relative error `|a - n| / max(|a|, |n|, floor)` between
/// analytic and central-difference gradients. The floor absorbs difference
/// noise on tensors whose true gradient vanishes (a shift or scale that the
/// following batch norm cancels). Returns (worst error, tensors with signal).
fn finite_difference_check(
    params: &ModelParams,
    analytic: &ModelParams,
    loss: impl Fn(&ModelParams) -> f64,
    in_graph: impl Fn(ParamGroup) -> bool,
) -> Result<(f64, usize), String> {
    let h = 1e-5;
    let floor = 1e-5;
    let mut worst: f64 = 0.0;
    let mut with_signal = 0;
    let analytic_tensors = analytic.tensors();
    for (k, tensor) in analytic_tensors.iter().enumerate() {
        let name = &tensor.name;
        let a = tensor.data;
        let mut numeric = vec![0.0; a.len()];
        for (j, slot) in numeric.iter_mut().enumerate() {
            let mut plus = params.clone();
            plus.tensors_mut()[k].data[j] += h;
            let mut minus = params.clone();
            minus.tensors_mut()[k].data[j] -= h;
            *slot = (loss(&plus) - loss(&minus)) / (2.0 * h);
        }
        let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let diff: Vec<f64> = a.iter().zip(&numeric).map(|(x, y)| x - y).collect();
        let scale = norm(a).max(norm(&numeric));
        if !in_graph(params.group_of(name)) {
            ensure!(scale == 0.0, "{name}: gradient outside the graph ({scale:.2e})");
            continue;
        }
        let rel = norm(&diff) / scale.max(floor);
        ensure!(
            rel <= 1e-4,
            "{name}: relative error {rel:.3e} (|analytic| {:.3e})",
            norm(a)
        );
        worst = worst.max(rel);
        if scale > floor {
            with_signal += 1;
        }
    }
    Ok((worst, with_signal))
}

fn gradient_checks() -> Check {
    let cfg = tiny_model();
    let params = ModelParams::init(&cfg, 11).map_err(err)?;
    let synth = SynthConfig {
        classes: 3,
        per_class: 2,
        frames: 4,
        joints: 2,
        ..Default::default()
    };
    let dataset = generate_synthetic(&synth, 5).map_err(err)?;
    let data = DataConfig {
        preprocess: PreprocessConfig {
            target_length: 4,
            trim_min: 1.0,
            trim_max: 1.0,
            test_trim: 1.0,
        },
        ..Default::default()
    };
    let stage1 = Stage1Config {
        masking: MaskingConfig {
            ratio: 0.5,
            ..Default::default()
        },
        ..Default::default()
    };
    let samples = build_stage1_batch(&dataset, &[0, 2, 4], &data, &stage1, cfg.segment_len, 1).map_err(err)?;
    ensure!(
        samples
            .iter()
            .all(|s| s.tokens.tokens().dim().0 * s.tokens.num_joints() == 4),
        "expected 4 tokens"
    );
    let (_, grad1) = batch_loss_and_grad(&params, &samples).map_err(err)?;
    let (w1, n1) = finite_difference_check(
        &params,
        &grad1,
        |p| batch_loss_and_grad(p, &samples).unwrap().0,
        |g| !matches!(g, ParamGroup::Projector | ParamGroup::Predictor),
    )?;

    let views: Vec<_> = [1, 3, 5]
        .iter()
        .map(|&i| segment(&dataset.sequences[i], cfg.segment_len).unwrap())
        .collect();
    let mut r = rng::stream(&[77]);
    let mut neighbors = Mat::from_shape_fn((3, cfg.embed_dim), |_| r.random_range(-1.0..1.0));
    for mut row in neighbors.rows_mut() {
        let n = row.dot(&row).sqrt();
        row /= n;
    }
    let tau = 0.2;
    let fwd = stage2_forward(&params, &views).map_err(err)?;
    let (_, grad2) = stage2_backward(&params, &fwd, &neighbors, tau, false).map_err(err)?;
    let (w2, n2) = finite_difference_check(
        &params,
        &grad2,
        |p| {
            let f = stage2_forward(p, &views).unwrap();
            stage2_backward(p, &f, &neighbors, tau, false).unwrap().0
        },
        |g| !matches!(g, ParamGroup::Decoder),
    )?;
    ensure!(n1 > 15 && n2 > 15, "too few tensors carried gradient ({n1}, {n2})");
    Ok(format!(
        "reconstruction: {n1} tensors, worst {w1:.2e}; contrastive: {n2} tensors, worst {w2:.2e}"
    ))
}

// ---------------------------------------------------------------- 4

fn degenerate_losses() -> Check {
    let one = Mat::from_shape_vec((1, 3), vec![0.6, 0.8, 0.0]).map_err(err)?;
    let single = nnclr_loss(&one, &one, 0.07).map_err(err)?;
    ensure!(single == 0.0, "n = 1 loss {single}");
    let mut worst: f64 = 0.0;
    for n in [2usize, 4, 7, 32] {
        // identical rows on each side make every logit equal
        let nn = Mat::from_shape_fn((n, 3), |(_, j)| [0.6, 0.0, 0.8][j]);
        let pred = Mat::from_shape_fn((n, 3), |(_, j)| [0.0, 1.0, 0.0][j]);
        let loss = nnclr_loss(&nn, &pred, 0.07).map_err(err)?;
        let gap = (loss - (n as f64).ln()).abs();
        ensure!(gap <= 1e-9, "n = {n}: {loss} vs ln n");
        worst = worst.max(gap);
    }
    let target = Mat::from_shape_fn((5, 12), |(i, j)| (i as f64 - j as f64) * 0.3);
    let exact = mamp_loss(std::slice::from_ref(&target), std::slice::from_ref(&target)).map_err(err)?;
    ensure!(exact == 0.0, "exact prediction loss {exact}");
    let zero = Mat::zeros((1, 12));
    let unit = mamp_loss(&[&zero + 1.0], &[zero]).map_err(err)?;
    ensure!(unit == 12.0, "unit residual loss {unit}");
    Ok(format!(
        "n=1 -> 0, |uniform - ln n| <= {worst:.1e}, exact -> 0, unit residual -> {unit}"
    ))
}

// ---------------------------------------------------------------- 5

fn overfit_oracle() -> Check {
    let synth = SynthConfig {
        classes: 4,
        per_class: 16,
        frames: 120,
        joints: 25,
        ..Default::default()
    };
    let dataset = generate_synthetic(&synth, 2).map_err(err)?;
    let model = ModelConfig {
        embed_dim: 16,
        encoder_layers: 2,
        decoder_layers: 1,
        heads: 2,
        ffn_hidden: 32,
        segment_len: 4,
        predictor_hidden: 16,
        joints: 25,
        max_segments: 4,
        channels: 3,
    };
    let data = DataConfig {
        preprocess: PreprocessConfig {
            target_length: 16,
            trim_min: 1.0,
            trim_max: 1.0,
            ..Default::default()
        },
        ..Default::default()
    };
    let cfg = Stage1Config {
        epochs: 200,
        batch_size: 8,
        lr: 3e-3,
        seed: 1,
        ..Default::default()
    };
    let params = ModelParams::init(&model, 1).map_err(err)?;
    let out = train_stage1(&dataset, &cfg, &data, params, |_| {}).map_err(err)?;
    let first = out.history[0].mean_loss;
    let last = out.history.last().expect("200 epochs").mean_loss;
    ensure!(dataset.len() == 64, "dataset has {} sequences", dataset.len());
    ensure!(last <= 0.1 * first, "epoch 1 {first:.4}, epoch 200 {last:.4}");
    Ok(format!(
        "epoch 1 {first:.4} -> epoch 200 {last:.4} ({:.1}%)",
        100.0 * last / first
    ))
}

// ---------------------------------------------------------------- 6

fn small_model() -> ModelConfig {
    ModelConfig {
        embed_dim: 32,
        encoder_layers: 4,
        decoder_layers: 1,
        heads: 4,
        ffn_hidden: 64,
        segment_len: 4,
        predictor_hidden: 64,
        joints: 25,
        max_segments: 8,
        channels: 3,
    }
}

fn small_data() -> DataConfig {
    DataConfig {
        preprocess: PreprocessConfig {
            target_length: 32,
            ..Default::default()
        },
        ..Default::default()
    }
}

fn knn_correct(params: &ModelParams, train: &Dataset, test: &Dataset, data: &DataConfig) -> Result<usize, String> {
    let ftr = extract_features(params, train, &data.preprocess, None, None).map_err(err)?;
    let fte = extract_features(params, test, &data.preprocess, None, None).map_err(err)?;
    let pred = knn_predict(&ftr.features, &ftr.labels, &fte.features, 1).map_err(err)?;
    Ok(pred.iter().zip(&fte.labels).filter(|(a, b)| a == b).count())
}

fn directional_check() -> Check {
    let synth = SynthConfig {
        classes: 5,
        per_class: 50,
        test_per_class: 10,
        frames: 120,
        joints: 25,
        ..Default::default()
    };
    let full = generate_synthetic(&synth, 3).map_err(err)?;
    let train = full.subset(Some(SYNTH_PROTOCOL), false).map_err(err)?;
    let test = full.subset(Some(SYNTH_PROTOCOL), true).map_err(err)?;
    ensure!(
        train.len() == 200 && test.len() == 50,
        "split sizes {} / {}",
        train.len(),
        test.len()
    );
    let data = small_data();
    let init = ModelParams::init(&small_model(), 1).map_err(err)?;
    let stage1 = Stage1Config {
        epochs: 30,
        seed: 1,
        ..Default::default()
    };
    let s1 = train_stage1(&train, &stage1, &data, init.clone(), |_| {})
        .map_err(err)?
        .params;
    let stage2 = Stage2Config {
        epochs: 20,
        batch_size: 25,
        queue_size: 100,
        tau2: 0.1,
        seed: 1,
        ..Default::default()
    };
    let s2 = train_stage2(&train, &stage2, &data, s1.clone(), |_| {})
        .map_err(err)?
        .params;
    let n = test.len();
    let c0 = knn_correct(&init, &train, &test, &data)?;
    let c1 = knn_correct(&s1, &train, &test, &data)?;
    let c2 = knn_correct(&s2, &train, &test, &data)?;
    let pct = |c: usize| 100.0 * c as f64 / n as f64;
    let summary = format!(
        "KNN k=1 untrained {:.0}%, stage 1 {:.0}%, stage 2 {:.0}%",
        pct(c0),
        pct(c1),
        pct(c2)
    );
    // integer form of acc2 >= acc1 - 2 points and acc2 >= 60%
    ensure!(
        100 * c2 + 2 * n >= 100 * c1,
        "{summary}: stage 2 lost more than 2 points"
    );
    ensure!(100 * c2 >= 60 * n, "{summary}: stage 2 below 60%");
    Ok(summary)
}

// ---------------------------------------------------------------- 7

fn frozen_bits(dir: &Path, layers: usize) -> Result<BTreeMap<String, Vec<u32>>, String> {
    let bytes = std::fs::read(dir.join(checkpoint::PARAMS_FILE)).map_err(err)?;
    Ok(decode_tensors(&bytes)
        .map_err(err)?
        .into_iter()
        .filter(|(name, _, _)| {
            let group = stars_core::nn::model::param_group(name);
            match group {
                ParamGroup::Embedding => true,
                ParamGroup::Encoder(i) => i <= layers / 2,
                _ => false,
            }
        })
        .map(|(name, _, v)| (name, v.iter().map(|x| x.to_bits()).collect()))
        .collect())
}

fn freeze_invariant() -> Check {
    let synth = SynthConfig {
        classes: 3,
        per_class: 6,
        frames: 40,
        joints: 25,
        ..Default::default()
    };
    let dataset = generate_synthetic(&synth, 8).map_err(err)?;
    let mut model = small_model();
    model.embed_dim = 16;
    model.heads = 2;
    let data = small_data();
    let dir = tempfile::tempdir().map_err(err)?;
    let stage1 = Stage1Config {
        epochs: 3,
        seed: 4,
        ..Default::default()
    };
    let init = ModelParams::init(&model, 4).map_err(err)?;
    let s1_dir = dir.path().join("s1");
    stars_core::pretrain::run_stage1(&dataset, &stage1, &data, init, &s1_dir, |_| {}).map_err(err)?;
    let reference = frozen_bits(&s1_dir, model.encoder_layers)?;
    ensure!(!reference.is_empty(), "no frozen tensors found");
    let runs = [
        ("two-stage", TuneMode::TwoStage, 0usize, 3usize),
        ("three-stage", TuneMode::ThreeStage, 2, 2),
        ("heads only", TuneMode::ThreeStage, 3, 0),
    ];
    for (label, mode, head_epochs, epochs) in runs {
        let (loaded, _) = checkpoint::load_checkpoint(&s1_dir).map_err(err)?;
        let cfg = Stage2Config {
            epochs,
            head_epochs,
            mode,
            batch_size: 6,
            queue_size: 12,
            seed: 4,
            ..Default::default()
        };
        let out = dir.path().join(label);
        stars_core::contrastive::run_stage2(&dataset, &cfg, &data, loaded.clone(), &out, |_| {}).map_err(err)?;
        let after = frozen_bits(&out, model.encoder_layers)?;
        ensure!(after == reference, "{label}: frozen tensors changed");
        let (tuned, _) = checkpoint::load_checkpoint(&out).map_err(err)?;
        ensure!(tuned.projector != loaded.projector, "{label}: heads did not train");
        if epochs > 0 {
            ensure!(
                tuned.encoder[model.encoder_layers - 1] != loaded.encoder[model.encoder_layers - 1],
                "{label}: top layer did not train"
            );
        }
    }
    Ok(format!(
        "{} embedding and lower-half tensors bit-identical after two-stage, three-stage and head-only runs",
        reference.len()
    ))
}

// ---------------------------------------------------------------- 8

fn oracle_cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    let mut dot = 0.0;
    for i in 0..a.len() {
        dot += a[i] * b[i];
    }
    dot / (na * nb)
}

/// Exhaustive scan: repeatedly take the most similar unused row (lowest
/// index on ties), then vote.
fn oracle_vote(train: &[Vec<f64>], labels: &[usize], query: &[f64], k: usize) -> usize {
    let sims: Vec<f64> = train.iter().map(|r| oracle_cosine(query, r)).collect();
    let mut used = vec![false; train.len()];
    let mut count: BTreeMap<usize, usize> = BTreeMap::new();
    let mut total: BTreeMap<usize, f64> = BTreeMap::new();
    for _ in 0..k {
        let mut best: Option<usize> = None;
        for j in 0..train.len() {
            if !used[j] && best.is_none_or(|b| sims[j] > sims[b]) {
                best = Some(j);
            }
        }
        let j = best.expect("k <= rows");
        used[j] = true;
        *count.entry(labels[j]).or_default() += 1;
        *total.entry(labels[j]).or_default() += sims[j];
    }
    let mut winner = usize::MAX;
    for (&label, &c) in &count {
        if winner == usize::MAX {
            winner = label;
            continue;
        }
        let (wc, ws) = (count[&winner], total[&winner]);
        if c > wc || (c == wc && total[&label] > ws) {
            winner = label;
        }
    }
    winner
}

fn random_rows<R: Rng>(rng: &mut R, rows: usize, dim: usize) -> Vec<Vec<f64>> {
    (0..rows)
        .map(|_| {
            (0..dim)
                .map(|_| {
                    // coarse values make exact similarity ties common
                    if rng.random_bool(0.3) {
                        rng.random_range(-2..=2) as f64
                    } else {
                        rng.random_range(-1.0..1.0)
                    }
                })
                .collect()
        })
        .collect()
}

fn feature_set(rows: &[Vec<f64>], labels: Vec<usize>) -> FeatureSet {
    let dim = rows[0].len();
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    let ids = (0..labels.len()).map(|i| format!("r{i}")).collect();
    FeatureSet::new(
        Array2::from_shape_vec((rows.len(), dim), flat).unwrap(),
        labels,
        ids,
        FeatureMeta {
            checkpoint_hash: None,
            stage: None,
            test_trim: 0.9,
            target_length: 0,
            centered: true,
        },
    )
    .unwrap()
}

fn unit_vector<R: Rng>(rng: &mut R, dim: usize) -> Array1<f64> {
    let v: Array1<f64> = Array1::from_shape_fn(dim, |_| rng.random_range(-1.0..1.0));
    let n = v.dot(&v).sqrt();
    v / n
}

fn oracle_equivalences() -> Check {
    let instances = 1000;
    let mut rng = rng::stream(&[8, 8]);
    for case in 0..instances {
        let n = rng.random_range(1..40);
        let dim = rng.random_range(1..6);
        let classes = rng.random_range(1..5);
        let train = random_rows(&mut rng, n, dim);
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..classes)).collect();
        let rows = rng.random_range(1..8);
        let test = random_rows(&mut rng, rows, dim);
        let test_labels: Vec<usize> = (0..test.len()).map(|_| rng.random_range(0..classes)).collect();
        let k = rng.random_range(1..=n.min(10));
        let expected: Vec<usize> = test.iter().map(|q| oracle_vote(&train, &labels, q, k)).collect();
        let tr = feature_set(&train, labels.clone());
        let te = feature_set(&test, test_labels.clone());
        let got = knn_predict(&tr.features, &tr.labels, &te.features, k).map_err(err)?;
        ensure!(got == expected, "knn case {case}: {got:?} vs {expected:?}");
        let acc = expected.iter().zip(&test_labels).filter(|(a, b)| a == b).count() as f64 / test.len() as f64;
        ensure!(knn_eval(&tr, &te, k).map_err(err)? == acc, "knn accuracy case {case}");
    }
    for case in 0..instances {
        let classes = rng.random_range(2..5);
        let shots = rng.random_range(1..4);
        let dim = rng.random_range(1..5);
        let ex = random_rows(&mut rng, classes * shots, dim);
        let mut labels: Vec<usize> = (0..classes * shots).map(|i| i % classes).collect();
        // shuffle row order; balanced counts are kept
        for i in (1..labels.len()).rev() {
            labels.swap(i, rng.random_range(0..=i));
        }
        let rows = rng.random_range(1..6);
        let test = random_rows(&mut rng, rows, dim);
        let test_labels: Vec<usize> = (0..test.len()).map(|_| rng.random_range(0..classes)).collect();
        let expected = test
            .iter()
            .zip(&test_labels)
            .filter(|(q, &l)| oracle_vote(&ex, &labels, q, shots) == l)
            .count() as f64
            / test.len() as f64;
        let got = few_shot_eval(&feature_set(&ex, labels), &feature_set(&test, test_labels), shots).map_err(err)?;
        ensure!(got == expected, "few-shot case {case}: {got} vs {expected}");
    }
    for case in 0..instances {
        let cap = rng.random_range(1..20);
        let dim = rng.random_range(1..6);
        let mut queue = SupportQueue::new(cap, dim).map_err(err)?;
        let mut reference: VecDeque<Array1<f64>> = VecDeque::new();
        for _ in 0..rng.random_range(1..6) {
            let rows = rng.random_range(1..2 * cap + 2);
            let mut batch = Mat::zeros((rows, dim));
            for mut r in batch.rows_mut() {
                r.assign(&unit_vector(&mut rng, dim));
            }
            queue.update(&batch).map_err(err)?;
            for r in batch.rows() {
                if reference.len() == cap {
                    reference.pop_front();
                }
                reference.push_back(r.to_owned());
            }
            let entries = queue.entries();
            ensure!(
                entries.len() == reference.len() && entries.iter().zip(&reference).all(|(a, b)| a == b),
                "queue update case {case}: contents differ from deque"
            );
            let z = unit_vector(&mut rng, dim);
            let mut best = &reference[0];
            for e in reference.iter().skip(1) {
                if e.dot(&z) > best.dot(&z) {
                    best = e;
                }
            }
            let got = nearest_neighbor(z.view(), &queue).map_err(err)?;
            ensure!(got == best, "nearest-neighbor case {case}: {got} vs {best}");
        }
    }
    Ok(format!(
        "{instances} instances each of knn, few-shot, queue update and nearest neighbor match their references"
    ))
}

// ---------------------------------------------------------------- 9

fn stars(args: &[&str], cwd: &Path) -> Result<String, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_stars"))
        .args(args)
        .current_dir(cwd)
        .env("RUST_LOG", "warn")
        .env_remove("STARS_SEED")
        .output()
        .map_err(err)?;
    if !out.status.success() {
        return Err(format!(
            "`stars {}` exited {:?}: {}",
            args.join(" "),
            out.status.code(),
            String::from_utf8_lossy(&out.stderr)
        ));
    }
    String::from_utf8(out.stdout).map_err(err)
}

/// Stage-1 and stage-2 `params.bin` bytes plus the evaluation outputs.
struct PipelineRun {
    ck1: Vec<u8>,
    ck2: Vec<u8>,
    results: Vec<String>,
}

fn pipeline(dir: &Path) -> Result<PipelineRun, String> {
    let config = serde_json::json!({
        "model": {"embed_dim": 16, "encoder_layers": 2, "decoder_layers": 1, "heads": 2,
                  "ffn_hidden": 32, "segment_len": 4, "predictor_hidden": 32, "joints": 25,
                  "max_segments": 8, "channels": 3},
        "data": {"preprocess": {"target_length": 32}},
        "stage1": {"epochs": 3, "batch_size": 8},
        "stage2": {"epochs": 2, "batch_size": 8, "queue_size": 32},
        "seed": 13
    });
    std::fs::write(dir.join("run.json"), config.to_string()).map_err(err)?;
    let steps: [&[&str]; 5] = [
        &[
            "gen-synth",
            "--classes",
            "3",
            "--per-class",
            "8",
            "--test-per-class",
            "3",
            "--frames",
            "48",
            "--seed",
            "5",
            "--out",
            "data",
        ],
        &[
            "pretrain",
            "--config",
            "run.json",
            "--data",
            "data",
            "--protocol",
            "holdout",
            "--out",
            "ck1",
        ],
        &[
            "tune",
            "--config",
            "run.json",
            "--data",
            "data",
            "--protocol",
            "holdout",
            "--init",
            "ck1",
            "--mode",
            "three-stage",
            "--head-epochs",
            "1",
            "--out",
            "ck2",
        ],
        &[
            "extract",
            "--ckpt",
            "ck2",
            "--data",
            "data",
            "--split",
            "train",
            "--out",
            "train.fts",
        ],
        &[
            "extract", "--ckpt", "ck2", "--data", "data", "--split", "test", "--out", "test.fts",
        ],
    ];
    for step in steps {
        stars(step, dir)?;
    }
    let mut results = Vec::new();
    for eval in [
        &["eval", "knn", "--train", "train.fts", "--test", "test.fts", "--k", "1"][..],
        &[
            "eval",
            "fewshot",
            "--train",
            "train.fts",
            "--test",
            "test.fts",
            "--n",
            "5",
        ],
        &[
            "eval",
            "linear",
            "--train",
            "train.fts",
            "--test",
            "test.fts",
            "--epochs",
            "20",
        ],
    ] {
        results.push(stars(eval, dir)?.trim().to_string());
    }
    let ck1 = std::fs::read(dir.join("ck1").join(checkpoint::PARAMS_FILE)).map_err(err)?;
    let ck2 = std::fs::read(dir.join("ck2").join(checkpoint::PARAMS_FILE)).map_err(err)?;
    Ok(PipelineRun { ck1, ck2, results })
}

fn pipeline_determinism() -> Check {
    let a = tempfile::tempdir().map_err(err)?;
    let b = tempfile::tempdir().map_err(err)?;
    let ra = pipeline(a.path())?;
    let rb = pipeline(b.path())?;
    ensure!(ra.ck1 == rb.ck1, "stage-1 checkpoints differ");
    ensure!(ra.ck2 == rb.ck2, "stage-2 checkpoints differ");
    ensure!(
        ra.results == rb.results,
        "results differ: {:?} vs {:?}",
        ra.results,
        rb.results
    );
    for name in [
        "train.fts",
        "test.fts",
        "ck1/meta.json",
        "ck2/meta.json",
        "data/manifest.jsonl",
    ] {
        let x = std::fs::read(a.path().join(name)).map_err(err)?;
        let y = std::fs::read(b.path().join(name)).map_err(err)?;
        ensure!(x == y, "{name} differs between runs");
    }
    for r in &ra.results {
        let v: serde_json::Value = serde_json::from_str(r).map_err(err)?;
        ensure!(v["accuracy"].is_number(), "no accuracy in {r}");
    }
    Ok(format!(
        "checkpoints ({} + {} bytes) and results identical: {}",
        ra.ck1.len(),
        ra.ck2.len(),
        ra.results.join(" ")
    ))
}

// ---------------------------------------------------------------- 10

fn finite_f32() -> impl Strategy<Value = f32> {
    prop_oneof![
        any::<f32>().prop_filter("finite", |x| x.is_finite()),
        Just(-0.0f32),
        Just(f32::MIN_POSITIVE / 8.0),
        -10.0..10.0f32,
    ]
}

fn round_trips() -> Check {
    let dir = tempfile::tempdir().map_err(err)?;
    let path = dir.path().join("x.skl");
    let mut runner = TestRunner::new(PropConfig {
        cases: 200,
        ..PropConfig::default()
    });
    let shapes = (1usize..12, 1usize..6, 1usize..4);
    runner
        .run(
            &shapes.prop_flat_map(|(t, v, c)| {
                (
                    Just((t, v, c)),
                    prop::collection::vec(finite_f32().prop_map(f64::from), t * v * c),
                )
            }),
            |((t, v, c), values)| {
                let seq = SkeletonSequence::new(Array3::from_shape_vec((t, v, c), values).unwrap()).unwrap();
                write_sequence(&path, &seq).unwrap();
                let back = load_sequence(&path).unwrap();
                let bits = |s: &SkeletonSequence| s.frames().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
                prop_assert_eq!(bits(&seq), bits(&back));
                prop_assert_eq!(seq.frames().dim(), back.frames().dim());
                Ok(())
            },
        )
        .map_err(|e| format!("SKL1: {e}"))?;

    let fts = dir.path().join("x.fts");
    let mut runner = TestRunner::new(PropConfig {
        cases: 200,
        ..PropConfig::default()
    });
    runner
        .run(
            &(1usize..20, 1usize..9).prop_flat_map(|(rows, dim)| {
                (
                    prop::collection::vec(finite_f32(), rows * dim),
                    prop::collection::vec(0usize..50, rows),
                    Just(dim),
                )
            }),
            |(values, labels, dim)| {
                let rows: Vec<Vec<f64>> = values
                    .chunks(dim)
                    .map(|c| c.iter().map(|&x| x as f64).collect())
                    .collect();
                let fs = feature_set(&rows, labels);
                write_features(&fts, &fs).unwrap();
                let first = std::fs::read(&fts).unwrap();
                let back = read_features(&fts).unwrap();
                let bits = |f: &FeatureSet| f.features.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
                prop_assert_eq!(bits(&fs), bits(&back));
                prop_assert_eq!(&fs.labels, &back.labels);
                prop_assert_eq!(&fs.ids, &back.ids);
                write_features(&fts, &back).unwrap();
                prop_assert_eq!(first, std::fs::read(&fts).unwrap());
                Ok(())
            },
        )
        .map_err(|e| format!("FTS1: {e}"))?;

    let mut runner = TestRunner::new(PropConfig {
        cases: 500,
        ..PropConfig::default()
    });
    runner
        .run(
            &(1usize..10, 1usize..8, 1usize..6, 1usize..4).prop_flat_map(|(te, l, v, c)| {
                (Just((te, l, v, c)), prop::collection::vec(-5.0..5.0f64, te * l * v * c))
            }),
            |((te, l, v, c), values)| {
                let seq = SkeletonSequence::new(Array3::from_shape_vec((te * l, v, c), values).unwrap()).unwrap();
                let seg = segment(&seq, l).unwrap();
                if seg.tokens().dim() != (te, v, l * c) {
                    return Err(TestCaseError::fail("token grid shape"));
                }
                let back = unsegment(&seg).unwrap();
                prop_assert_eq!(&back, &seq);
                prop_assert_eq!(segment(&back, l).unwrap(), seg);
                Ok(())
            },
        )
        .map_err(|e| format!("segment: {e}"))?;
    Ok("200 SKL1 and 200 FTS1 files bit-exact; segment/unsegment bijective on 500 shapes".into())
}
