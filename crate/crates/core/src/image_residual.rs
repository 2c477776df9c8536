//! Image-level in-context residual learning.
//!
//! Global class embeddings are pushed through a small adapter; the query's
//! adapted feature minus the prompt prototype forms the residual feature fed
//! to a binary classifier, whose sigmoid output is the image-level score
//! `s_i` and is trained with focal loss.

use ndarray::Array1;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{sigmoid, Mlp};
use crate::scoring::{focal_loss, FocalLossConfig};

/// Two-layer adapter ψ: `W2 relu(W1 v + b1) + b2`, input and output `d'`.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterParams {
    pub mlp: Mlp,
}

impl AdapterParams {
    /// `hidden` of `None` picks the default width `d' / 4` (at least 1).
    pub fn init(global_dim: usize, hidden: Option<usize>, rng: &mut ChaCha8Rng) -> Result<Self> {
        let hidden = hidden.unwrap_or_else(|| (global_dim / 4).max(1));
        if hidden == 0 {
            return Err(Error::Config("adapter hidden width must be positive".into()));
        }
        Ok(Self {
            mlp: Mlp::new(&[global_dim, hidden, global_dim], rng)?,
        })
    }

    pub fn dim(&self) -> usize {
        self.mlp.input_dim()
    }
}

/// Classifier head η over residual features, ending in a single logit.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageClassifierParams {
    pub mlp: Mlp,
}

impl ImageClassifierParams {
    pub fn init(global_dim: usize, hidden: &[usize], rng: &mut ChaCha8Rng) -> Result<Self> {
        let mut dims = vec![global_dim];
        dims.extend_from_slice(hidden);
        dims.push(1);
        Ok(Self {
            mlp: Mlp::new(&dims, rng)?,
        })
    }
}

/// Image-level residual feature `F_x`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageResidual {
    pub features: Array1<f64>,
}

/// Run the adapter on one global feature vector.
pub fn adapt_feature(global: &Array1<f64>, params: &AdapterParams) -> Result<Array1<f64>> {
    if global.len() != params.dim() {
        return Err(Error::Contract(format!(
            "adapter expects dimension {}, got {}",
            params.dim(),
            global.len()
        )));
    }
    let out = params.mlp.forward(global)?;
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!(
            "adapter produced non-finite output (dim {})",
            params.dim()
        )));
    }
    Ok(out)
}

/// Mean adapted feature of the prompt set.
pub fn prompt_prototype(prompts: &[Array1<f64>], params: &AdapterParams) -> Result<Array1<f64>> {
    if prompts.is_empty() {
        return Err(Error::InvalidInput("prompt prototype needs at least one prompt".into()));
    }
    let mut acc = Array1::<f64>::zeros(params.dim());
    for p in prompts {
        acc += &adapt_feature(p, params)?;
    }
    Ok(acc / prompts.len() as f64)
}

/// Residual feature: adapted query minus the prompt prototype.
pub fn image_residual(
    query_global: &Array1<f64>,
    prototype: &Array1<f64>,
    params: &AdapterParams,
) -> Result<ImageResidual> {
    if prototype.len() != params.dim() {
        return Err(Error::Contract(format!(
            "prototype dimension {} does not match adapter {}",
            prototype.len(),
            params.dim()
        )));
    }
    let adapted = adapt_feature(query_global, params)?;
    Ok(ImageResidual {
        features: adapted - prototype,
    })
}

/// Image-level anomaly probability `s_i`: sigmoid of the classifier logit.
pub fn image_level_classify(residual: &ImageResidual, params: &ImageClassifierParams) -> Result<f64> {
    let logit = params.mlp.forward(&residual.features)?[0];
    if !logit.is_finite() {
        return Err(Error::Numeric("non-finite classifier logit".into()));
    }
    Ok(sigmoid(logit))
}

/// Mean focal loss of image-level predictions against binary labels.
/// Predictions must already be probabilities strictly inside (0, 1).
pub fn irl_loss(predictions: &[f64], labels: &[bool], cfg: &FocalLossConfig) -> Result<f64> {
    if predictions.len() != labels.len() || predictions.is_empty() {
        return Err(Error::InvalidInput(format!(
            "predictions ({}) and labels ({}) must be nonempty and equal-length",
            predictions.len(),
            labels.len()
        )));
    }
    for &p in predictions {
        if !(p > 0.0 && p < 1.0) {
            return Err(Error::InvalidInput(format!(
                "prediction {p} outside the open interval (0, 1)"
            )));
        }
    }
    let total: f64 = predictions
        .iter()
        .zip(labels)
        .map(|(p, y)| focal_loss(*p, *y, cfg))
        .sum();
    Ok(total / predictions.len() as f64)
}
