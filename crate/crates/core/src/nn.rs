//! Minimal dense-network machinery: feed-forward MLPs with ReLU hidden
//! layers and a linear output, manual backpropagation, and an Adam optimizer.
//!
//! All math is f64 and single-threaded so that training runs are exactly
//! reproducible from a seed.

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// One affine layer: `z = W x + b` with `W: (out, in)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

impl DenseLayer {
    pub fn zeros(input: usize, output: usize) -> Self {
        Self {
            weights: Array2::zeros((output, input)),
            bias: Array1::zeros(output),
        }
    }

    /// Xavier-uniform weights, zero bias.
    pub fn xavier(input: usize, output: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = (6.0 / (input + output) as f64).sqrt();
        let weights =
            Array2::from_shape_fn((output, input), |_| rng.random::<f64>() * 2.0 * bound - bound);
        Self {
            weights,
            bias: Array1::zeros(output),
        }
    }

    /// Small-magnitude random weights (std ~ `scale`), zero bias.
    pub fn small(input: usize, output: usize, scale: f64, rng: &mut ChaCha8Rng) -> Self {
        let weights =
            Array2::from_shape_fn((output, input), |_| (rng.random::<f64>() * 2.0 - 1.0) * scale);
        Self {
            weights,
            bias: Array1::zeros(output),
        }
    }

    pub fn forward(&self, input: &Array1<f64>) -> Array1<f64> {
        self.weights.dot(input) + &self.bias
    }

    fn param_count(&self) -> usize {
        self.weights.len() + self.bias.len()
    }
}

/// Feed-forward network: ReLU on every hidden layer, linear output.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<DenseLayer>,
}

/// Intermediate activations kept from a forward pass for backprop.
#[derive(Debug, Clone)]
pub struct MlpCache {
    /// Layer inputs: `inputs[0]` is the network input, `inputs[i]` the
    /// post-activation output of layer `i-1`.
    pub inputs: Vec<Array1<f64>>,
    /// Pre-activation values per layer.
    pub pre_activations: Vec<Array1<f64>>,
    pub output: Array1<f64>,
}

/// Parameter-shaped gradient accumulator for one [`Mlp`].
#[derive(Debug, Clone)]
pub struct MlpGrads {
    pub weights: Vec<Array2<f64>>,
    pub bias: Vec<Array1<f64>>,
}

impl MlpGrads {
    pub fn zeros_like(mlp: &Mlp) -> Self {
        Self {
            weights: mlp.layers.iter().map(|l| Array2::zeros(l.weights.dim())).collect(),
            bias: mlp.layers.iter().map(|l| Array1::zeros(l.bias.len())).collect(),
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for w in &mut self.weights {
            *w *= factor;
        }
        for b in &mut self.bias {
            *b *= factor;
        }
    }

    pub fn add(&mut self, other: &MlpGrads) {
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            *a += b;
        }
        for (a, b) in self.bias.iter_mut().zip(&other.bias) {
            *a += b;
        }
    }
}

impl Mlp {
    /// Build a network over the given layer sizes, e.g. `[896, 224, 896]`.
    /// Hidden layers get Xavier init; the output layer small random weights.
    pub fn new(dims: &[usize], rng: &mut ChaCha8Rng) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::Contract(format!(
                "an MLP needs at least input and output sizes, got {dims:?}"
            )));
        }
        if dims.contains(&0) {
            return Err(Error::Contract(format!("zero-sized MLP layer in {dims:?}")));
        }
        let mut layers = Vec::with_capacity(dims.len() - 1);
        for i in 0..dims.len() - 1 {
            let last = i == dims.len() - 2;
            let layer = if last {
                DenseLayer::small(dims[i], dims[i + 1], 1e-2, rng)
            } else {
                DenseLayer::xavier(dims[i], dims[i + 1], rng)
            };
            layers.push(layer);
        }
        Ok(Self { layers })
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weights.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("mlp has layers").weights.nrows()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(DenseLayer::param_count).sum()
    }

    /// Forward pass without keeping activations.
    pub fn forward(&self, input: &Array1<f64>) -> Result<Array1<f64>> {
        Ok(self.forward_cached(input)?.output)
    }

    /// Forward pass that keeps everything backprop needs.
    pub fn forward_cached(&self, input: &Array1<f64>) -> Result<MlpCache> {
        if input.len() != self.input_dim() {
            return Err(Error::Contract(format!(
                "MLP expects input of size {}, got {}",
                self.input_dim(),
                input.len()
            )));
        }
        let n = self.layers.len();
        let mut inputs = Vec::with_capacity(n);
        let mut pre_activations = Vec::with_capacity(n);
        let mut current = input.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            inputs.push(current.clone());
            let z = layer.forward(&current);
            pre_activations.push(z.clone());
            current = if i + 1 < n { z.mapv(|v| v.max(0.0)) } else { z };
        }
        if current.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite MLP output (input dim {}, {} layers)",
                self.input_dim(),
                n
            )));
        }
        Ok(MlpCache {
            inputs,
            pre_activations,
            output: current,
        })
    }

    /// Backpropagate `grad_output` (dL/d output) through the cached pass.
    /// Accumulates parameter gradients into `grads` and returns dL/d input.
    pub fn backward(
        &self,
        cache: &MlpCache,
        grad_output: &Array1<f64>,
        grads: &mut MlpGrads,
    ) -> Array1<f64> {
        let n = self.layers.len();
        let mut grad_z = grad_output.clone();
        for i in (0..n).rev() {
            if i + 1 < n {
                // Upstream grad is w.r.t. relu(z); gate it by the relu mask.
                let mask = cache.pre_activations[i].mapv(|v| if v > 0.0 { 1.0 } else { 0.0 });
                grad_z = &grad_z * &mask;
            }
            let input = &cache.inputs[i];
            for (r, g) in grad_z.iter().enumerate() {
                if *g != 0.0 {
                    let mut row = grads.weights[i].row_mut(r);
                    row.scaled_add(*g, input);
                }
            }
            grads.bias[i] += &grad_z;
            grad_z = self.layers[i].weights.t().dot(&grad_z);
        }
        grad_z
    }

    /// Flatten all parameters in a fixed order (layer by layer, weights
    /// row-major then bias). Used by checkpointing and gradient checks.
    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for layer in &self.layers {
            out.extend(layer.weights.iter().copied());
            out.extend(layer.bias.iter().copied());
        }
        out
    }

    /// Write back parameters flattened by [`Mlp::flat_params`].
    pub fn set_flat_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::Contract(format!(
                "expected {} parameters, got {}",
                self.param_count(),
                flat.len()
            )));
        }
        let mut offset = 0;
        for layer in &mut self.layers {
            for w in layer.weights.iter_mut() {
                *w = flat[offset];
                offset += 1;
            }
            for b in layer.bias.iter_mut() {
                *b = flat[offset];
                offset += 1;
            }
        }
        Ok(())
    }
}

/// Numerically stable logistic function.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Adam state for one MLP's parameters.
#[derive(Debug, Clone)]
pub struct AdamState {
    mean_w: Vec<Array2<f64>>,
    mean_b: Vec<Array1<f64>>,
    var_w: Vec<Array2<f64>>,
    var_b: Vec<Array1<f64>>,
}

/// Adam with the standard defaults (beta1 0.9, beta2 0.999, eps 1e-8).
#[derive(Debug, Clone)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    step: u64,
    states: Vec<AdamState>,
}

impl Adam {
    pub fn new(learning_rate: f64, models: &[&Mlp]) -> Self {
        let states = models
            .iter()
            .map(|m| AdamState {
                mean_w: m.layers.iter().map(|l| Array2::zeros(l.weights.dim())).collect(),
                mean_b: m.layers.iter().map(|l| Array1::zeros(l.bias.len())).collect(),
                var_w: m.layers.iter().map(|l| Array2::zeros(l.weights.dim())).collect(),
                var_b: m.layers.iter().map(|l| Array1::zeros(l.bias.len())).collect(),
            })
            .collect();
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step: 0,
            states,
        }
    }

    /// Apply one update to every model from its gradients. Model order must
    /// match the order passed to [`Adam::new`].
    pub fn step(&mut self, models: &mut [&mut Mlp], grads: &[&MlpGrads]) {
        assert_eq!(models.len(), self.states.len());
        assert_eq!(grads.len(), self.states.len());
        self.step += 1;
        let t = self.step as f64;
        let bc1 = 1.0 - self.beta1.powf(t);
        let bc2 = 1.0 - self.beta2.powf(t);
        for ((model, grad), state) in models.iter_mut().zip(grads).zip(&mut self.states) {
            for (i, layer) in model.layers.iter_mut().enumerate() {
                update_tensor(
                    layer.weights.as_slice_mut().expect("contiguous weights"),
                    grad.weights[i].as_slice().expect("contiguous grads"),
                    state.mean_w[i].as_slice_mut().expect("contiguous state"),
                    state.var_w[i].as_slice_mut().expect("contiguous state"),
                    self.learning_rate,
                    self.beta1,
                    self.beta2,
                    self.epsilon,
                    bc1,
                    bc2,
                );
                update_tensor(
                    layer.bias.as_slice_mut().expect("contiguous bias"),
                    grad.bias[i].as_slice().expect("contiguous grads"),
                    state.mean_b[i].as_slice_mut().expect("contiguous state"),
                    state.var_b[i].as_slice_mut().expect("contiguous state"),
                    self.learning_rate,
                    self.beta1,
                    self.beta2,
                    self.epsilon,
                    bc1,
                    bc2,
                );
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn update_tensor(
    params: &mut [f64],
    grads: &[f64],
    mean: &mut [f64],
    var: &mut [f64],
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    bias_correction1: f64,
    bias_correction2: f64,
) {
    for i in 0..params.len() {
        let g = grads[i];
        mean[i] = beta1 * mean[i] + (1.0 - beta1) * g;
        var[i] = beta2 * var[i] + (1.0 - beta2) * g * g;
        let m_hat = mean[i] / bias_correction1;
        let v_hat = var[i] / bias_correction2;
        params[i] -= lr * m_hat / (v_hat.sqrt() + eps);
    }
}
