//! Score fusion and training losses.
//!
//! The aggregated patch residual map, the image-level score `s_i`, and the
//! text-prior score `s_a` are combined into a holistic map; a small scoring
//! head over that map plus an `alpha`-weighted maximum patch residual yields
//! the final anomaly score. Both the image-level classifier and the final
//! score are trained with focal loss.

use ndarray::{Array1, Array2};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{sigmoid, Mlp};
use crate::patch_residual::{patch_level_score, ResidualMap};

const PROB_CLAMP: f64 = 1e-7;

/// Focal loss hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FocalLossConfig {
    /// Focusing exponent; 0 reduces to weighted cross-entropy.
    pub gamma: f64,
    /// Weight of the positive (anomalous) class, in (0, 1].
    pub pos_weight: f64,
}

impl Default for FocalLossConfig {
    fn default() -> Self {
        Self {
            gamma: 2.0,
            pos_weight: 0.25,
        }
    }
}

impl FocalLossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(Error::Config(format!("focal gamma must be >= 0, got {}", self.gamma)));
        }
        if !(self.pos_weight > 0.0 && self.pos_weight <= 1.0) {
            return Err(Error::Config(format!(
                "focal pos_weight must be in (0, 1], got {}",
                self.pos_weight
            )));
        }
        Ok(())
    }
}

/// Focal loss `-w_t (1 - p_t)^gamma ln(p_t)` with `p_t = p` for anomalous
/// targets and `1 - p` for normal ones; `w_t` is `pos_weight` or its
/// complement. `p` is clamped to `[1e-7, 1 - 1e-7]` before evaluation.
pub fn focal_loss(p: f64, anomalous: bool, cfg: &FocalLossConfig) -> f64 {
    let p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
    let (p_t, w_t) = if anomalous {
        (p, cfg.pos_weight)
    } else {
        (1.0 - p, 1.0 - cfg.pos_weight)
    };
    -w_t * (1.0 - p_t).powf(cfg.gamma) * p_t.ln()
}

/// d focal_loss / d p. Zero in the clamped region, matching the loss.
pub fn focal_loss_grad(p: f64, anomalous: bool, cfg: &FocalLossConfig) -> f64 {
    if p <= PROB_CLAMP || p >= 1.0 - PROB_CLAMP {
        return 0.0;
    }
    let (p_t, w_t, sign) = if anomalous {
        (p, cfg.pos_weight, 1.0)
    } else {
        (1.0 - p, 1.0 - cfg.pos_weight, -1.0)
    };
    let one_minus = 1.0 - p_t;
    // d/dp_t of -(1-p_t)^g ln p_t, times w_t and the p_t chain sign.
    let d = cfg.gamma * one_minus.powf(cfg.gamma - 1.0) * p_t.ln() - one_minus.powf(cfg.gamma) / p_t;
    sign * w_t * d
}

/// The holistic in-context residual map: patch residuals with the two
/// scalar scores broadcast-added, so every element lies in [0, 4].
#[derive(Debug, Clone, PartialEq)]
pub struct HolisticMap {
    values: Array2<f64>,
}

impl HolisticMap {
    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn shape(&self) -> (usize, usize) {
        self.values.dim()
    }

    /// Row-major flattening fed to the scoring head.
    pub fn flattened(&self) -> Array1<f64> {
        Array1::from_iter(self.values.iter().copied())
    }
}

/// Broadcast-add the image-level and text-prior scores onto the aggregated
/// patch residual map.
pub fn holistic_map(patch_map: &ResidualMap, s_i: f64, s_a: f64) -> Result<HolisticMap> {
    for (name, v) in [("s_i", s_i), ("s_a", s_a)] {
        if !(v > 0.0 && v < 1.0) {
            return Err(Error::InvalidInput(format!(
                "{name} must lie strictly inside (0, 1), got {v}"
            )));
        }
    }
    Ok(HolisticMap {
        values: patch_map.values() + s_i + s_a,
    })
}

/// Parameters of the holistic scoring head plus the patch-score weight.
#[derive(Debug, Clone, PartialEq)]
pub struct HolisticScorerParams {
    pub head: Mlp,
    pub alpha: f64,
}

impl HolisticScorerParams {
    /// Head over a flattened `h*w` map with the given hidden widths.
    pub fn init(patch_count: usize, hidden: &[usize], alpha: f64, rng: &mut ChaCha8Rng) -> Result<Self> {
        if alpha < 0.0 || !alpha.is_finite() {
            return Err(Error::Config(format!("alpha must be nonnegative, got {alpha}")));
        }
        let mut dims = vec![patch_count];
        dims.extend_from_slice(hidden);
        dims.push(1);
        Ok(Self {
            head: Mlp::new(&dims, rng)?,
            alpha,
        })
    }
}

/// Final anomaly score: head output on the flattened holistic map plus
/// `alpha * max(patch residual map)`. Unbounded; consumed as a ranking score.
pub fn anomaly_score(
    hmap: &HolisticMap,
    patch_map: &ResidualMap,
    params: &HolisticScorerParams,
) -> Result<f64> {
    let flat = hmap.flattened();
    if flat.len() != params.head.input_dim() {
        return Err(Error::Contract(format!(
            "holistic head expects {} inputs, map has {}",
            params.head.input_dim(),
            flat.len()
        )));
    }
    let head_out = params.head.forward(&flat)?[0];
    Ok(head_out + params.alpha * patch_level_score(patch_map))
}

/// Mean focal loss over `sigmoid(score)` per item.
pub fn holistic_loss(scores: &[f64], labels: &[bool], cfg: &FocalLossConfig) -> Result<f64> {
    if scores.len() != labels.len() || scores.is_empty() {
        return Err(Error::InvalidInput(format!(
            "scores ({}) and labels ({}) must be nonempty and equal-length",
            scores.len(),
            labels.len()
        )));
    }
    let total: f64 = scores
        .iter()
        .zip(labels)
        .map(|(s, y)| focal_loss(sigmoid(*s), *y, cfg))
        .sum();
    Ok(total / scores.len() as f64)
}

/// Composite training objective: image-residual loss plus holistic loss.
pub fn total_loss(irl: f64, holistic: f64) -> f64 {
    irl + holistic
}
