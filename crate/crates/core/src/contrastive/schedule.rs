//! Depth-wise learning rates: `lr_i = base * decay^(N - i)` for encoder
//! layer `i` of `N`, optionally freezing the embedding and layers
//! `1..=N/2`. Projector and predictor always train at `base`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ParamGroup;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TuneSchedule {
    pub base_lr: f64,
    pub decay: f64,
    pub layers: usize,
    pub freeze_lower_half: bool,
    /// Learning rate of encoder layer `i` at index `i - 1`.
    pub layer_lrs: Vec<f64>,
}

pub fn build_tune_schedule(base_lr: f64, decay: f64, layers: usize, freeze_lower_half: bool) -> Result<TuneSchedule> {
    if !(base_lr > 0.0 && base_lr.is_finite()) {
        return Err(Error::invalid("base_lr", format!("{base_lr} must be > 0")));
    }
    if !(0.0..=1.0).contains(&decay) {
        return Err(Error::invalid("decay", format!("{decay} not in [0, 1]")));
    }
    if layers < 2 {
        return Err(Error::invalid("layers", format!("{layers} < 2")));
    }
    let frozen = if freeze_lower_half { layers / 2 } else { 0 };
    let layer_lrs = (1..=layers)
        .map(|i| {
            let depth = (layers - i) as i32;
            if i <= frozen || (decay == 0.0 && depth > 0) {
                0.0
            } else if depth == 0 {
                base_lr
            } else {
                // Dividing by the inverse ratio keeps decimal inputs such as
                // 0.2 on their nearest doubles (0.001 * 0.2^3 rounds up one ulp).
                base_lr / (1.0 / decay).powi(depth)
            }
        })
        .collect();
    Ok(TuneSchedule {
        base_lr,
        decay,
        layers,
        freeze_lower_half,
        layer_lrs,
    })
}

impl TuneSchedule {
    /// Schedule that trains only the heads (encoder fully frozen).
    pub fn heads_only(base_lr: f64, layers: usize) -> Self {
        Self {
            base_lr,
            decay: 0.0,
            layers,
            freeze_lower_half: true,
            layer_lrs: vec![0.0; layers],
        }
    }

    pub fn lr_for(&self, group: ParamGroup) -> f64 {
        match group {
            ParamGroup::Embedding => {
                if self.freeze_lower_half {
                    0.0
                } else {
                    self.layer_lrs[0]
                }
            }
            ParamGroup::Encoder(i) => self.layer_lrs[i - 1],
            ParamGroup::Decoder => 0.0,
            ParamGroup::Projector | ParamGroup::Predictor => self.base_lr,
        }
    }

    pub fn is_frozen(&self, group: ParamGroup) -> bool {
        self.lr_for(group) == 0.0
    }
}
