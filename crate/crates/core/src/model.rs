//! The end-to-end detector: learnable parameter bundle plus the forward and
//! backward passes that tie patch residuals, image residuals, and the text
//! prior into one anomaly score.
//!
//! Only the adapter, the image-level classifier, and the holistic scoring
//! head carry gradients; encoder embeddings, patch residual maps, and the
//! text-prior score are all frozen inputs to the learnable part.

use ndarray::Array1;
use rand_chacha::ChaCha8Rng;

use crate::encoder::PatchTokenMaps;
use crate::error::{Error, Result};
use crate::image_residual::{AdapterParams, ImageClassifierParams};
use crate::nn::{sigmoid, MlpCache, MlpGrads};
use crate::patch_residual::{
    aggregate_residual, layer_residual_map_diag, patch_level_score, ResidualDiagnostics,
    ResidualMap,
};
use crate::scoring::{
    focal_loss, focal_loss_grad, holistic_map, FocalLossConfig, HolisticMap, HolisticScorerParams,
};
use crate::text_prior::{text_prior_score, TextPriorConfig, TextPrototypes};

/// All learnable parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectorParams {
    pub adapter: AdapterParams,
    pub classifier: ImageClassifierParams,
    pub scorer: HolisticScorerParams,
}

/// Widths used to initialize [`DetectorParams`].
#[derive(Debug, Clone)]
pub struct DetectorShape {
    pub global_dim: usize,
    pub patch_count: usize,
    pub adapter_hidden: Option<usize>,
    pub classifier_hidden: Vec<usize>,
    pub head_hidden: Vec<usize>,
    pub alpha: f64,
}

impl DetectorParams {
    pub fn init(shape: &DetectorShape, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(Self {
            adapter: AdapterParams::init(shape.global_dim, shape.adapter_hidden, rng)?,
            classifier: ImageClassifierParams::init(shape.global_dim, &shape.classifier_hidden, rng)?,
            scorer: HolisticScorerParams::init(shape.patch_count, &shape.head_hidden, shape.alpha, rng)?,
        })
    }

    pub fn learnable_count(&self) -> usize {
        self.adapter.mlp.param_count()
            + self.classifier.mlp.param_count()
            + self.scorer.head.param_count()
    }
}

/// Gradients for every learnable parameter group.
#[derive(Debug, Clone)]
pub struct DetectorGrads {
    pub adapter: MlpGrads,
    pub classifier: MlpGrads,
    pub head: MlpGrads,
}

impl DetectorGrads {
    pub fn zeros_like(params: &DetectorParams) -> Self {
        Self {
            adapter: MlpGrads::zeros_like(&params.adapter.mlp),
            classifier: MlpGrads::zeros_like(&params.classifier.mlp),
            head: MlpGrads::zeros_like(&params.scorer.head),
        }
    }

    pub fn scale(&mut self, factor: f64) {
        self.adapter.scale(factor);
        self.classifier.scale(factor);
        self.head.scale(factor);
    }
}

/// Per-episode score decomposition.
#[derive(Debug, Clone)]
pub struct ScoreBreakdown {
    /// Maximum of the aggregated patch residual map.
    pub s_p: f64,
    /// Image-level residual classifier probability.
    pub s_i: f64,
    /// Text-prior abnormality probability.
    pub s_a: f64,
    /// Final anomaly score (unbounded ranking score).
    pub score: f64,
    /// Aggregated patch residual map.
    pub patch_map: ResidualMap,
    /// Holistic map fed to the scoring head.
    pub holistic: HolisticMap,
    pub diagnostics: ResidualDiagnostics,
}

/// Forward activations kept for backprop.
#[derive(Debug, Clone)]
pub struct EpisodeCache {
    adapter_query: MlpCache,
    adapter_prompts: Vec<MlpCache>,
    classifier: MlpCache,
    head: MlpCache,
    s_i: f64,
    score: f64,
}

/// Scoring options resolved from configuration.
#[derive(Debug, Clone)]
pub struct ScoreOptions {
    /// Encoder layer indices feeding the patch residual average.
    pub layers: Vec<usize>,
    pub text: TextPriorConfig,
}

fn selected_layers<'a>(
    maps: &'a PatchTokenMaps,
    layers: &[usize],
) -> Result<Vec<&'a ndarray::Array3<f64>>> {
    if layers.is_empty() {
        return Err(Error::Config("at least one encoder layer must be selected".into()));
    }
    layers
        .iter()
        .map(|&l| {
            maps.layers().get(l).ok_or_else(|| {
                Error::Config(format!(
                    "layer index {l} out of range for a {}-layer backend",
                    maps.layer_count()
                ))
            })
        })
        .collect()
}

/// Aggregated patch residual map of a query against the prompt set, over the
/// selected encoder layers.
pub fn query_patch_map(
    query: &PatchTokenMaps,
    prompts: &[&PatchTokenMaps],
    layers: &[usize],
    diag: &mut ResidualDiagnostics,
) -> Result<ResidualMap> {
    if prompts.is_empty() {
        return Err(Error::InvalidInput("at least one prompt image is required".into()));
    }
    let query_layers = selected_layers(query, layers)?;
    let prompt_layers: Vec<Vec<&ndarray::Array3<f64>>> = prompts
        .iter()
        .map(|p| selected_layers(p, layers))
        .collect::<Result<_>>()?;
    let mut maps = Vec::with_capacity(layers.len());
    for (pos, &layer_idx) in layers.iter().enumerate() {
        let at_layer: Vec<&ndarray::Array3<f64>> =
            prompt_layers.iter().map(|p| p[pos]).collect();
        maps.push(layer_residual_map_diag(
            query_layers[pos],
            &at_layer,
            Some(layer_idx),
            diag,
        )?);
    }
    aggregate_residual(&maps)
}

/// Full forward pass for one episode. Returns the score decomposition and
/// the caches needed to backpropagate through the learnable parameters.
pub fn forward_episode(
    params: &DetectorParams,
    query: &PatchTokenMaps,
    prompts: &[&PatchTokenMaps],
    protos: &TextPrototypes,
    opts: &ScoreOptions,
) -> Result<(ScoreBreakdown, EpisodeCache)> {
    let mut diagnostics = ResidualDiagnostics::default();
    let patch_map = query_patch_map(query, prompts, &opts.layers, &mut diagnostics)?;
    let s_p = patch_level_score(&patch_map);

    // Image-level branch, with caches for every adapter application.
    let adapter_prompts: Vec<MlpCache> = prompts
        .iter()
        .map(|p| params.adapter.mlp.forward_cached(p.class_embedding()))
        .collect::<Result<_>>()?;
    let mut prototype = Array1::<f64>::zeros(params.adapter.dim());
    for cache in &adapter_prompts {
        prototype += &cache.output;
    }
    prototype /= adapter_prompts.len() as f64;
    let adapter_query = params.adapter.mlp.forward_cached(query.class_embedding())?;
    let residual = &adapter_query.output - &prototype;
    let classifier = params.classifier.mlp.forward_cached(&residual)?;
    let s_i = sigmoid(classifier.output[0]);

    let s_a = text_prior_score(query.class_embedding(), protos, &opts.text)?;

    let holistic = holistic_map(&patch_map, s_i, s_a)?;
    let flat = holistic.flattened();
    if flat.len() != params.scorer.head.input_dim() {
        return Err(Error::Contract(format!(
            "holistic head expects {} inputs, map has {}",
            params.scorer.head.input_dim(),
            flat.len()
        )));
    }
    let head = params.scorer.head.forward_cached(&flat)?;
    let score = head.output[0] + params.scorer.alpha * s_p;
    if !score.is_finite() {
        return Err(Error::Numeric(format!("non-finite anomaly score {score}")));
    }

    let breakdown = ScoreBreakdown {
        s_p,
        s_i,
        s_a,
        score,
        patch_map,
        holistic,
        diagnostics,
    };
    let cache = EpisodeCache {
        adapter_query,
        adapter_prompts,
        classifier,
        head,
        s_i,
        score,
    };
    Ok((breakdown, cache))
}

/// Episode loss: focal on the image-level probability plus focal on the
/// sigmoid-squashed final score.
pub fn episode_loss(cache: &EpisodeCache, anomalous: bool, focal: &FocalLossConfig) -> f64 {
    focal_loss(cache.s_i, anomalous, focal) + focal_loss(sigmoid(cache.score), anomalous, focal)
}

/// Accumulate the gradients of [`episode_loss`] into `grads`. Gradients are
/// unscaled; divide by the batch size for a batch-mean objective.
pub fn backward_episode(
    params: &DetectorParams,
    cache: &EpisodeCache,
    anomalous: bool,
    focal: &FocalLossConfig,
    grads: &mut DetectorGrads,
) {
    // Holistic branch: dL/d score through the sigmoid squash.
    let p_h = sigmoid(cache.score);
    let d_score = focal_loss_grad(p_h, anomalous, focal) * p_h * (1.0 - p_h);
    let grad_flat = params.scorer.head.backward(
        &cache.head,
        &Array1::from_elem(1, d_score),
        &mut grads.head,
    );

    // s_i is broadcast into every holistic-map element and also drives the
    // image-level focal term directly.
    let d_s_i = grad_flat.sum() + focal_loss_grad(cache.s_i, anomalous, focal);
    let d_logit = d_s_i * cache.s_i * (1.0 - cache.s_i);
    let grad_residual = params.classifier.mlp.backward(
        &cache.classifier,
        &Array1::from_elem(1, d_logit),
        &mut grads.classifier,
    );

    // Residual = adapted query minus the prompt prototype.
    params
        .adapter
        .mlp
        .backward(&cache.adapter_query, &grad_residual, &mut grads.adapter);
    let prompt_scale = -1.0 / cache.adapter_prompts.len() as f64;
    let grad_prompt = grad_residual.mapv(|v| v * prompt_scale);
    for prompt_cache in &cache.adapter_prompts {
        params
            .adapter
            .mlp
            .backward(prompt_cache, &grad_prompt, &mut grads.adapter);
    }
}

/// Convenience wrapper for inference: forward pass only.
pub fn score_episode(
    params: &DetectorParams,
    query: &PatchTokenMaps,
    prompts: &[&PatchTokenMaps],
    protos: &TextPrototypes,
    opts: &ScoreOptions,
) -> Result<ScoreBreakdown> {
    forward_episode(params, query, prompts, protos, opts).map(|(b, _)| b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{EncoderBackend, ImageTensor, MockBackend, MockConfig};
    use crate::scoring::total_loss;
    use crate::text_prior::{build_prompt_bank, text_prototypes, PromptStyle};
    use ndarray::Array3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn backend() -> MockBackend {
        MockBackend::new(MockConfig {
            layers: 3,
            grid: 4,
            patch_dim: 8,
            global_dim: 16,
            seed: 7,
            resolution: 8,
        })
        .unwrap()
    }

    fn image(seed: u64) -> ImageTensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ImageTensor::new(Array3::from_shape_fn((3, 8, 8), |_| rng.random::<f64>())).unwrap()
    }

    fn shape() -> DetectorShape {
        DetectorShape {
            global_dim: 16,
            patch_count: 16,
            adapter_hidden: None,
            classifier_hidden: vec![8, 4],
            head_hidden: vec![6, 3],
            alpha: 1.0,
        }
    }

    fn options() -> ScoreOptions {
        ScoreOptions {
            layers: vec![0, 1, 2],
            text: TextPriorConfig::default(),
        }
    }

    fn setup() -> (MockBackend, DetectorParams, crate::text_prior::TextPrototypes) {
        let b = backend();
        let params =
            DetectorParams::init(&shape(), &mut ChaCha8Rng::seed_from_u64(123)).unwrap();
        let bank = build_prompt_bank("widget", PromptStyle::Defect).unwrap();
        let protos = text_prototypes(&bank, &b, true).unwrap();
        (b, params, protos)
    }

    #[test]
    fn self_match_query_zeroes_patch_score() {
        let (b, params, protos) = setup();
        let q = b.encode_image(&image(1)).unwrap();
        let other = b.encode_image(&image(2)).unwrap();
        let breakdown =
            score_episode(&params, &q, &[&q, &other], &protos, &options()).unwrap();
        assert!(breakdown.s_p <= 1e-6, "s_p = {}", breakdown.s_p);
    }

    #[test]
    fn scores_are_in_contract_ranges() {
        let (b, params, protos) = setup();
        let q = b.encode_image(&image(3)).unwrap();
        let p1 = b.encode_image(&image(4)).unwrap();
        let p2 = b.encode_image(&image(5)).unwrap();
        let breakdown = score_episode(&params, &q, &[&p1, &p2], &protos, &options()).unwrap();
        assert!(breakdown.s_i > 0.0 && breakdown.s_i < 1.0);
        assert!(breakdown.s_a > 0.0 && breakdown.s_a < 1.0);
        assert!(breakdown.s_p >= 0.0 && breakdown.s_p <= 2.0);
        assert!(breakdown.score.is_finite());
        for v in breakdown.holistic.values() {
            assert!(*v >= 0.0 && *v <= 4.0);
        }
    }

    #[test]
    fn prompt_permutation_and_duplication_leave_score_unchanged() {
        let (b, params, protos) = setup();
        let q = b.encode_image(&image(10)).unwrap();
        let p1 = b.encode_image(&image(11)).unwrap();
        let p2 = b.encode_image(&image(12)).unwrap();
        let p3 = b.encode_image(&image(13)).unwrap();
        let opts = options();
        let base = score_episode(&params, &q, &[&p1, &p2, &p3], &protos, &opts).unwrap();
        let permuted = score_episode(&params, &q, &[&p3, &p1, &p2], &protos, &opts).unwrap();
        let duplicated =
            score_episode(&params, &q, &[&p1, &p2, &p3, &p1, &p2, &p3], &protos, &opts).unwrap();
        assert!((base.score - permuted.score).abs() <= 1e-9);
        assert!((base.score - duplicated.score).abs() <= 1e-9);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let (b, params, protos) = setup();
        let q = b.encode_image(&image(20)).unwrap();
        let p1 = b.encode_image(&image(21)).unwrap();
        let p2 = b.encode_image(&image(22)).unwrap();
        let focal = FocalLossConfig::default();
        let opts = options();
        let label = true;

        let (_, cache) = forward_episode(&params, &q, &[&p1, &p2], &protos, &opts).unwrap();
        let mut grads = DetectorGrads::zeros_like(&params);
        backward_episode(&params, &cache, label, &focal, &mut grads);

        let loss_at = |p: &DetectorParams| -> f64 {
            let (_, c) = forward_episode(p, &q, &[&p1, &p2], &protos, &opts).unwrap();
            episode_loss(&c, label, &focal)
        };

        let step = 1e-4;
        let mut checked = 0;
        let mut check_group =
            |mlp_sel: &dyn Fn(&mut DetectorParams) -> &mut crate::nn::Mlp, grad: &MlpGrads| {
                let mut probe = params.clone();
                let flat = mlp_sel(&mut probe).flat_params();
                let mut analytic = Vec::new();
                for i in 0..grad.weights.len() {
                    analytic.extend(grad.weights[i].iter().copied());
                    analytic.extend(grad.bias[i].iter().copied());
                }
                // Probe a deterministic subset to keep the test quick.
                let stride = (flat.len() / 25).max(1);
                for idx in (0..flat.len()).step_by(stride) {
                    let mut fp = flat.clone();
                    fp[idx] += step;
                    let mut plus = params.clone();
                    mlp_sel(&mut plus).set_flat_params(&fp).unwrap();
                    fp[idx] -= 2.0 * step;
                    let mut minus = params.clone();
                    mlp_sel(&mut minus).set_flat_params(&fp).unwrap();
                    let fd = (loss_at(&plus) - loss_at(&minus)) / (2.0 * step);
                    let a = analytic[idx];
                    let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-6);
                    assert!(rel < 1e-3, "idx {idx}: analytic {a} vs fd {fd} (rel {rel})");
                    checked += 1;
                }
            };
        check_group(&|p| &mut p.adapter.mlp, &grads.adapter);
        check_group(&|p| &mut p.classifier.mlp, &grads.classifier);
        check_group(&|p| &mut p.scorer.head, &grads.head);
        assert!(checked > 30);
    }

    #[test]
    fn episode_loss_decomposes_as_total_loss() {
        let (b, params, protos) = setup();
        let q = b.encode_image(&image(30)).unwrap();
        let p1 = b.encode_image(&image(31)).unwrap();
        let focal = FocalLossConfig::default();
        let (breakdown, cache) =
            forward_episode(&params, &q, &[&p1], &protos, &options()).unwrap();
        let irl = focal_loss(breakdown.s_i, false, &focal);
        let hol = focal_loss(sigmoid(breakdown.score), false, &focal);
        let loss = episode_loss(&cache, false, &focal);
        assert!((loss - total_loss(irl, hol)).abs() < 1e-15);
        assert!((total_loss(irl, hol) - hol - irl).abs() < 1e-15);
    }

    #[test]
    fn invalid_layer_selection_is_rejected() {
        let (b, params, protos) = setup();
        let q = b.encode_image(&image(40)).unwrap();
        let p = b.encode_image(&image(41)).unwrap();
        let opts = ScoreOptions {
            layers: vec![5],
            text: TextPriorConfig::default(),
        };
        assert!(score_episode(&params, &q, &[&p], &protos, &opts).is_err());
        let opts = ScoreOptions {
            layers: vec![],
            text: TextPriorConfig::default(),
        };
        assert!(score_episode(&params, &q, &[&p], &protos, &opts).is_err());
    }
}
