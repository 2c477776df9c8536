//! Episode simulation and the training loop.
//!
//! Training draws in-context episodes from auxiliary data: one query image
//! (either class) plus `k` normal prompt images, never including the query.
//! Each optimizer step updates only the adapter, classifier, and holistic
//! head; the encoder stays frozen throughout.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::sync::Arc;

use crate::checkpoint::{Checkpoint, LossPoint};
use crate::config::RunConfig;
use crate::data::{DatasetManifest, ManifestEntry};
use crate::encoder::PatchTokenMaps;
use crate::error::{Error, Result};
use crate::model::{backward_episode, episode_loss, forward_episode, DetectorGrads};
use crate::nn::Adam;
use crate::pipeline::Pipeline;
use crate::sampling::{pick_index, sample_without_replacement};
use crate::text_prior::TextPrototypes;

/// One training episode: a labeled query plus `k` normal prompts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Episode {
    pub query: ManifestEntry,
    pub prompts: Vec<ManifestEntry>,
}

impl Episode {
    /// Structural invariants: prompts nonempty and all normal, query not a
    /// member of the prompt set.
    pub fn check(&self) -> Result<()> {
        if self.prompts.is_empty() {
            return Err(Error::Contract("episode has no prompts".into()));
        }
        if self.prompts.iter().any(|p| p.anomalous) {
            return Err(Error::Contract("episode contains an anomalous prompt".into()));
        }
        if self.prompts.iter().any(|p| p.path == self.query.path) {
            return Err(Error::Contract("query appears in its own prompt set".into()));
        }
        Ok(())
    }
}

/// Sample one episode: the query uniform over all entries, prompts uniform
/// without replacement over normal entries excluding the query.
pub fn sample_episode(
    dataset: &DatasetManifest,
    k: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Episode> {
    if k == 0 {
        return Err(Error::InvalidInput("episode needs k >= 1 prompts".into()));
    }
    if dataset.is_empty() {
        return Err(Error::InsufficientData("dataset has no entries".into()));
    }
    let query_idx = pick_index(rng, dataset.len());
    let query = dataset.entries[query_idx].clone();
    let normal_pool: Vec<usize> = dataset
        .entries
        .iter()
        .enumerate()
        .filter(|(i, e)| !e.anomalous && *i != query_idx)
        .map(|(i, _)| i)
        .collect();
    if normal_pool.len() < k {
        return Err(Error::InsufficientData(format!(
            "need {k} normal images excluding the query, found {}",
            normal_pool.len()
        )));
    }
    let picked = sample_without_replacement(rng, normal_pool.len(), k);
    let prompts = picked
        .into_iter()
        .map(|i| dataset.entries[normal_pool[i]].clone())
        .collect();
    let episode = Episode { query, prompts };
    episode.check()?;
    Ok(episode)
}

/// An episode with everything encoded, ready for the learnable part.
pub struct EpisodeFeatures {
    pub query: Arc<PatchTokenMaps>,
    pub prompts: Vec<Arc<PatchTokenMaps>>,
    pub protos: Arc<TextPrototypes>,
    pub anomalous: bool,
}

/// Encode an episode through the pipeline's frozen backend.
pub fn encode_episode(pipeline: &Pipeline, episode: &Episode) -> Result<EpisodeFeatures> {
    let query = pipeline.encode_path(&episode.query.path)?;
    let prompts = episode
        .prompts
        .iter()
        .map(|p| pipeline.encode_path(&p.path))
        .collect::<Result<Vec<_>>>()?;
    let protos = pipeline.prototypes_for(&episode.query.category)?;
    Ok(EpisodeFeatures {
        query,
        prompts,
        protos,
        anomalous: episode.query.anomalous,
    })
}

/// One optimizer step over a batch of encoded episodes. Returns the batch
/// loss measured before the update. A non-finite loss aborts with no update.
pub fn train_step(
    batch: &[EpisodeFeatures],
    pipeline: &mut Pipeline,
    optimizer: &mut Adam,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::InvalidInput("empty training batch".into()));
    }
    let focal = pipeline.config.scoring.focal;
    let mut grads = DetectorGrads::zeros_like(&pipeline.params);
    let mut loss_sum = 0.0;
    for episode in batch {
        let prompt_refs: Vec<&PatchTokenMaps> =
            episode.prompts.iter().map(|a| a.as_ref()).collect();
        let (_, cache) = forward_episode(
            &pipeline.params,
            &episode.query,
            &prompt_refs,
            &episode.protos,
            pipeline.score_options(),
        )?;
        loss_sum += episode_loss(&cache, episode.anomalous, &focal);
        backward_episode(&pipeline.params, &cache, episode.anomalous, &focal, &mut grads);
    }
    let batch_len = batch.len() as f64;
    let loss = loss_sum / batch_len;
    if !loss.is_finite() {
        return Err(Error::Numeric(format!(
            "non-finite batch loss {loss}; parameters left untouched"
        )));
    }
    grads.scale(1.0 / batch_len);
    let params = &mut pipeline.params;
    optimizer.step(
        &mut [
            &mut params.adapter.mlp,
            &mut params.classifier.mlp,
            &mut params.scorer.head,
        ],
        &[&grads.adapter, &grads.classifier, &grads.head],
    );
    Ok(loss)
}

/// Outcome of [`fit`]: the checkpoint plus the pipeline holding the trained
/// parameters (reusable for immediate evaluation).
pub struct FitOutcome {
    pub checkpoint: Checkpoint,
    pub pipeline: Pipeline,
}

/// Train on an auxiliary manifest: `epochs x ceil(N / batch_size)` steps
/// over freshly sampled episodes. `(dataset, config, seed)` fully determine
/// the loss history and the final parameters.
pub fn fit(dataset: &DatasetManifest, config: &RunConfig) -> Result<FitOutcome> {
    config.validate()?;
    let train = &config.train;
    if train.epochs > 0 {
        let normals = dataset.normal_count();
        let anomalies = dataset.anomaly_count();
        if normals == 0 || anomalies == 0 {
            return Err(Error::InsufficientData(format!(
                "training needs both classes, manifest has {normals} normal / {anomalies} anomalous"
            )));
        }
    }

    let mut pipeline = Pipeline::from_config(config.clone())?;
    let mut optimizer = Adam::new(
        train.learning_rate,
        &[
            &pipeline.params.adapter.mlp,
            &pipeline.params.classifier.mlp,
            &pipeline.params.scorer.head,
        ],
    );
    // Parameter init consumed the seed stream inside from_config; episode
    // sampling gets its own stream derived from the same seed.
    let mut rng = ChaCha8Rng::seed_from_u64(train.seed ^ 0x9e37_79b9_7f4a_7c15);

    let steps_per_epoch = dataset.len().div_ceil(train.batch_size);
    let mut loss_history = Vec::with_capacity(train.epochs * steps_per_epoch);
    let mut step = 0usize;
    for _epoch in 0..train.epochs {
        for _ in 0..steps_per_epoch {
            let mut batch = Vec::with_capacity(train.batch_size);
            for _ in 0..train.batch_size {
                let episode = sample_episode(dataset, train.k, &mut rng)?;
                batch.push(encode_episode(&pipeline, &episode)?);
            }
            let loss = train_step(&batch, &mut pipeline, &mut optimizer)?;
            step += 1;
            loss_history.push(LossPoint { step, loss });
        }
    }

    let checkpoint = Checkpoint {
        config: config.clone(),
        backend_id: pipeline.backend().identifier().to_string(),
        params: pipeline.params.clone(),
        epochs_completed: train.epochs,
        seed: train.seed,
        loss_history,
    };
    Ok(FitOutcome {
        checkpoint,
        pipeline,
    })
}
