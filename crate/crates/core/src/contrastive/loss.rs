//! Nearest-neighbor contrastive loss.
//!
//! For neighbors `nn` and predictions `p` (unit rows), with logits
//! `s_ik = <nn_i, p_k> / tau`:
//!
//! ```text
//! loss = (1/n) sum_i [ logsumexp_k s_ik - s_ii ]
//! d loss / d p_k = (1/(n tau)) sum_i (softmax_i(k) - [i == k]) nn_i
//! ```

use ndarray::Axis;

use super::queue::check_unit;
use crate::error::{Error, Result};
use crate::nn::Mat;

fn check_inputs(neighbors: &Mat, predictions: &Mat, tau: f64) -> Result<()> {
    if neighbors.nrows() == 0 {
        return Err(Error::invalid("batch", "n must be >= 1"));
    }
    if neighbors.dim() != predictions.dim() {
        return Err(Error::shape(
            "nnclr inputs",
            format!("{:?}", neighbors.dim()),
            format!("{:?}", predictions.dim()),
        ));
    }
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::invalid("tau2", format!("{tau} must be > 0")));
    }
    for row in neighbors.rows().into_iter().chain(predictions.rows()) {
        check_unit(row, "nnclr input")?;
    }
    Ok(())
}

/// Loss and gradient with respect to `predictions`; neighbors are constants.
pub fn nnclr_loss_and_grad(neighbors: &Mat, predictions: &Mat, tau: f64) -> Result<(f64, Mat)> {
    check_inputs(neighbors, predictions, tau)?;
    let n = neighbors.nrows();
    let mut probs = neighbors.dot(&predictions.t()) / tau;
    let mut loss = 0.0;
    for (i, mut row) in probs.axis_iter_mut(Axis(0)).enumerate() {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let lse = max + row.iter().map(|&s| (s - max).exp()).sum::<f64>().ln();
        loss += lse - row[i];
        row.mapv_inplace(|s| (s - lse).exp());
        row[i] -= 1.0;
    }
    // probs now holds softmax - identity
    let grad = probs.t().dot(neighbors) / (n as f64 * tau);
    Ok((loss / n as f64, grad))
}

pub fn nnclr_loss(neighbors: &Mat, predictions: &Mat, tau: f64) -> Result<f64> {
    nnclr_loss_and_grad(neighbors, predictions, tau).map(|(l, _)| l)
}
