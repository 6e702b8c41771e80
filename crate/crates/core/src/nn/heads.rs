//! Stage-2 heads: batch-norm projector, MLP predictor, row normalization.

use ndarray::{Array1, Axis};

use super::layers::{gelu, gelu_grad, Mat};
use super::model::{BatchNormStats, ModelParams, Predictor, Projector};
use crate::error::{Error, Result};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

pub struct ProjectCache {
    xhat: Mat,
    inv_std: Array1<f64>,
    mode: Mode,
}

/// Batch statistics of one training-mode projector call.
pub struct BatchMoments {
    pub mean: Array1<f64>,
    /// Biased variance (used for normalization).
    pub var: Array1<f64>,
    pub rows: usize,
}

/// Projector forward without touching running statistics.
pub fn project_forward(
    projector: &Projector,
    stats: &BatchNormStats,
    x: &Mat,
    mode: Mode,
) -> Result<(Mat, ProjectCache, Option<BatchMoments>)> {
    let n = x.nrows();
    let (mean, var, moments) = match mode {
        Mode::Train => {
            if n < 2 {
                return Err(Error::invalid("batch", "training-mode batch norm needs >= 2 rows"));
            }
            let mean = x.mean_axis(Axis(0)).expect("nonempty");
            let var = x.var_axis(Axis(0), 0.0);
            let moments = BatchMoments {
                mean: mean.clone(),
                var: var.clone(),
                rows: n,
            };
            (mean, var, Some(moments))
        }
        Mode::Eval => (stats.running_mean.clone(), stats.running_var.clone(), None),
    };
    let inv_std = var.mapv(|v| 1.0 / (v + BN_EPS).sqrt());
    let xhat = (x - &mean) * &inv_std;
    let y = &xhat * &projector.gamma + &projector.beta;
    Ok((y, ProjectCache { xhat, inv_std, mode }, moments))
}

/// Exponential moving update with the unbiased batch variance.
pub fn update_running_stats(stats: &mut BatchNormStats, moments: &BatchMoments) {
    let n = moments.rows as f64;
    let unbias = n / (n - 1.0);
    stats.running_mean *= 1.0 - BN_MOMENTUM;
    stats.running_mean.scaled_add(BN_MOMENTUM, &moments.mean);
    stats.running_var *= 1.0 - BN_MOMENTUM;
    stats.running_var.scaled_add(BN_MOMENTUM * unbias, &moments.var);
}

/// Batch-standardize (train) or apply running statistics (eval), then the
/// learnable scale/shift. Training mode updates the running statistics.
pub fn project(pooled: &Mat, params: &mut ModelParams, mode: Mode) -> Result<Mat> {
    let (y, _, moments) = project_forward(&params.projector, &params.bn_stats, pooled, mode)?;
    if let Some(m) = moments {
        update_running_stats(&mut params.bn_stats, &m);
    }
    Ok(y)
}

pub fn project_backward(projector: &Projector, cache: &ProjectCache, dy: &Mat, grad: &mut Projector) -> Mat {
    grad.gamma += &(dy * &cache.xhat).sum_axis(Axis(0));
    grad.beta += &dy.sum_axis(Axis(0));
    let dxhat = dy * &projector.gamma;
    match cache.mode {
        Mode::Eval => dxhat * &cache.inv_std,
        Mode::Train => {
            let n = dy.nrows() as f64;
            let sum_d = dxhat.sum_axis(Axis(0));
            let sum_dx = (&dxhat * &cache.xhat).sum_axis(Axis(0));
            let mut dx = dxhat * n - &sum_d - &(&cache.xhat * &sum_dx);
            dx *= &(&cache.inv_std / n);
            dx
        }
    }
}

pub struct PredictCache {
    input: Mat,
    pre_act: Mat,
    act: Mat,
}

/// `fc2(gelu(fc1(z)))`.
pub fn predict_forward(predictor: &Predictor, z: &Mat) -> Result<(Mat, PredictCache)> {
    if z.ncols() != predictor.fc1.weight.nrows() {
        return Err(Error::shape("predictor input", predictor.fc1.weight.nrows(), z.ncols()));
    }
    let pre_act = predictor.fc1.forward(z);
    let act = pre_act.mapv(gelu);
    let out = predictor.fc2.forward(&act);
    Ok((
        out,
        PredictCache {
            input: z.clone(),
            pre_act,
            act,
        },
    ))
}

pub fn predict(z: &Mat, params: &ModelParams) -> Result<Mat> {
    predict_forward(&params.predictor, z).map(|(y, _)| y)
}

pub fn predict_backward(predictor: &Predictor, cache: &PredictCache, dy: &Mat, grad: &mut Predictor) -> Mat {
    let mut dpre = predictor.fc2.backward(&cache.act, dy, &mut grad.fc2);
    dpre.zip_mut_with(&cache.pre_act, |d, &u| *d *= gelu_grad(u));
    predictor.fc1.backward(&cache.input, &dpre, &mut grad.fc1)
}

/// Row-wise L2 normalization; returns the normalized rows and the norms.
pub fn l2_normalize_rows(x: &Mat) -> (Mat, Array1<f64>) {
    let norms = x.map_axis(Axis(1), |r| r.dot(&r).sqrt()).mapv(|n| n.max(1e-12));
    let y = x / &norms.view().insert_axis(Axis(1));
    (y, norms)
}

/// Gradient through row normalization: `(du - u <u, du>) / |x|`.
pub fn l2_normalize_backward(normalized: &Mat, norms: &Array1<f64>, dy: &Mat) -> Mat {
    let mut dx = dy.clone();
    for (i, mut row) in dx.rows_mut().into_iter().enumerate() {
        let u = normalized.row(i);
        let proj = u.dot(&row);
        row.scaled_add(-proj, &u);
        row /= norms[i];
    }
    dx
}
