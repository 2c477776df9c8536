//! Patch-level in-context residual maps.
//!
//! Each query patch is compared against every patch of every prompt image at
//! the same layer; its residual is one minus the best cosine similarity. The
//! per-layer maps are averaged into the aggregated map whose maximum is the
//! fine-grained anomaly score `s_p`.

use ndarray::{s, Array2, Array3};

use crate::error::{Error, Result};

/// An `h x w` grid of nonnegative patch residuals in [0, 2].
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualMap {
    values: Array2<f64>,
    /// Which encoder layer produced this map; `None` for the aggregate.
    layer_index: Option<usize>,
}

impl ResidualMap {
    pub fn new(values: Array2<f64>, layer_index: Option<usize>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Contract("empty residual map".into()));
        }
        if values.iter().any(|v| !v.is_finite() || *v < 0.0 || *v > 2.0) {
            return Err(Error::Numeric("residual values must be finite and within [0, 2]".into()));
        }
        Ok(Self { values, layer_index })
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn layer_index(&self) -> Option<usize> {
        self.layer_index
    }

    pub fn shape(&self) -> (usize, usize) {
        self.values.dim()
    }
}

/// Bookkeeping accumulated while computing residual maps.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ResidualDiagnostics {
    /// Patches whose cosine was undefined (zero-norm embedding on either
    /// side) and was treated as similarity 0, i.e. residual 1.
    pub zero_norm_patches: usize,
}

/// Residual map of one layer: for each query patch, `1 - max` cosine
/// similarity over all patches of all prompt grids.
pub fn layer_residual_map(
    query_layer: &Array3<f64>,
    prompt_layers: &[&Array3<f64>],
    layer_index: Option<usize>,
) -> Result<ResidualMap> {
    let mut diag = ResidualDiagnostics::default();
    layer_residual_map_diag(query_layer, prompt_layers, layer_index, &mut diag)
}

/// As [`layer_residual_map`], also reporting degenerate-patch counts.
pub fn layer_residual_map_diag(
    query_layer: &Array3<f64>,
    prompt_layers: &[&Array3<f64>],
    layer_index: Option<usize>,
    diag: &mut ResidualDiagnostics,
) -> Result<ResidualMap> {
    if prompt_layers.is_empty() {
        return Err(Error::InvalidInput("residual map needs at least one prompt image".into()));
    }
    let (h, w, d) = query_layer.dim();
    for (k, prompt) in prompt_layers.iter().enumerate() {
        if prompt.dim() != (h, w, d) {
            return Err(Error::Contract(format!(
                "prompt {k} grid {:?} does not match query grid {:?}",
                prompt.dim(),
                (h, w, d)
            )));
        }
    }

    // Prompt patch norms are reused across every query patch. Zero-norm
    // prompt patches are flagged once and contribute cosine 0 as candidates.
    let mut has_degenerate_prompt = false;
    let prompt_norms: Vec<Array2<f64>> = prompt_layers
        .iter()
        .map(|p| {
            Array2::from_shape_fn((h, w), |(i, j)| {
                let v = p.slice(s![i, j, ..]);
                v.dot(&v).sqrt()
            })
        })
        .collect();
    for norms in &prompt_norms {
        let zeros = norms.iter().filter(|n| **n == 0.0).count();
        if zeros > 0 {
            diag.zero_norm_patches += zeros;
            has_degenerate_prompt = true;
        }
    }

    let mut values = Array2::<f64>::zeros((h, w));
    for i in 0..h {
        for j in 0..w {
            let q = query_layer.slice(s![i, j, ..]);
            let q_norm = q.dot(&q).sqrt();
            if q_norm == 0.0 {
                diag.zero_norm_patches += 1;
                values[(i, j)] = 1.0;
                continue;
            }
            let mut best = if has_degenerate_prompt { 0.0 } else { f64::NEG_INFINITY };
            for (k, prompt) in prompt_layers.iter().enumerate() {
                for pi in 0..h {
                    for pj in 0..w {
                        let p_norm = prompt_norms[k][(pi, pj)];
                        if p_norm == 0.0 {
                            continue;
                        }
                        let p = prompt.slice(s![pi, pj, ..]);
                        let cos = q.dot(&p) / (q_norm * p_norm);
                        if cos > best {
                            best = cos;
                        }
                    }
                }
            }
            // Cosine rounding can nudge past ±1; keep the residual in [0, 2].
            values[(i, j)] = (1.0 - best).clamp(0.0, 2.0);
        }
    }
    ResidualMap::new(values, layer_index)
}

/// Element-wise arithmetic mean of per-layer residual maps.
pub fn aggregate_residual(layer_maps: &[ResidualMap]) -> Result<ResidualMap> {
    if layer_maps.is_empty() {
        return Err(Error::InvalidInput("cannot aggregate zero residual maps".into()));
    }
    let shape = layer_maps[0].shape();
    for m in layer_maps {
        if m.shape() != shape {
            return Err(Error::Contract(format!(
                "residual map shape {:?} does not match {:?}",
                m.shape(),
                shape
            )));
        }
    }
    let mut acc = Array2::<f64>::zeros(shape);
    for m in layer_maps {
        acc += m.values();
    }
    acc /= layer_maps.len() as f64;
    ResidualMap::new(acc, None)
}

/// Fine-grained anomaly score `s_p`: the maximum element of the map.
pub fn patch_level_score(map: &ResidualMap) -> f64 {
    map.values().iter().copied().fold(f64::NEG_INFINITY, f64::max)
}
