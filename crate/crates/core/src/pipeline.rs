//! Pipeline assembly: a configured backend, detector parameters, and
//! memoized encoding so each image and each prompt bank is encoded once.
//! The encoder is frozen, so memoization cannot change any result.

use std::cell::RefCell;
use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::encoder::{
    preprocess_image, EncoderBackend, MockBackend, PatchTokenMaps, BACKEND_EXTERNAL, BACKEND_MOCK,
};
use crate::error::{io_err, Error, Result};
use crate::model::{score_episode, DetectorParams, ScoreBreakdown, ScoreOptions};
use crate::text_prior::{build_prompt_bank, parse_template_file, text_prototypes, TextPrototypes};

/// A ready-to-score pipeline.
pub struct Pipeline {
    backend: Box<dyn EncoderBackend>,
    pub params: DetectorParams,
    pub config: RunConfig,
    opts: ScoreOptions,
    image_cache: RefCell<HashMap<PathBuf, Arc<PatchTokenMaps>>>,
    proto_cache: RefCell<BTreeMap<String, Arc<TextPrototypes>>>,
}

/// Build the configured encoder backend. `external` is an adapter point:
/// implement [`EncoderBackend`] for a real backbone and use
/// [`Pipeline::with_backend`].
pub fn build_backend(config: &RunConfig) -> Result<Box<dyn EncoderBackend>> {
    match config.encoder.backend.as_str() {
        BACKEND_MOCK => Ok(Box::new(MockBackend::new(config.mock_config())?)),
        BACKEND_EXTERNAL => Err(Error::Config(
            "encoder.backend = \"external\" selected, but no external backend is linked into \
             this build; implement EncoderBackend and construct the pipeline with it"
                .into(),
        )),
        other => Err(Error::Config(format!("unknown encoder backend {other:?}"))),
    }
}

impl Pipeline {
    /// Fresh pipeline with parameters initialized from `train.seed`.
    pub fn from_config(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let backend = build_backend(&config)?;
        let geometry = backend.geometry();
        let shape = config.detector_shape(geometry.global_dim, geometry.patch_count());
        let mut rng = ChaCha8Rng::seed_from_u64(config.train.seed);
        let params = DetectorParams::init(&shape, &mut rng)?;
        Self::with_backend(config, backend, params)
    }

    /// Pipeline from a checkpoint; the rebuilt backend identifier must match
    /// the one recorded at save time.
    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<Self> {
        let config = ckpt.config.clone();
        Self::from_checkpoint_with_config(ckpt, config)
    }

    /// Pipeline from checkpoint parameters under an adjusted configuration
    /// (evaluation-time overrides). The configured backend must still match
    /// the checkpoint's recorded backend identifier.
    pub fn from_checkpoint_with_config(ckpt: Checkpoint, config: RunConfig) -> Result<Self> {
        let backend = build_backend(&config)?;
        if backend.identifier() != ckpt.backend_id {
            return Err(Error::IncompatibleCheckpoint(format!(
                "checkpoint was trained against backend {:?}, configuration builds {:?}",
                ckpt.backend_id,
                backend.identifier()
            )));
        }
        Self::with_backend(config, backend, ckpt.params)
    }

    /// Assemble a pipeline around an externally constructed backend.
    pub fn with_backend(
        config: RunConfig,
        backend: Box<dyn EncoderBackend>,
        params: DetectorParams,
    ) -> Result<Self> {
        config.validate()?;
        let geometry = backend.geometry();
        let layers = config.patch_residual.layers.resolve(geometry.layer_count)?;
        if params.scorer.head.input_dim() != geometry.patch_count() {
            return Err(Error::Contract(format!(
                "holistic head expects {} inputs, backend grid has {} patches",
                params.scorer.head.input_dim(),
                geometry.patch_count()
            )));
        }
        if params.adapter.dim() != geometry.global_dim {
            return Err(Error::Contract(format!(
                "adapter dimension {} does not match backend global dim {}",
                params.adapter.dim(),
                geometry.global_dim
            )));
        }
        let opts = ScoreOptions {
            layers,
            text: config.text_prior_config(),
        };
        Ok(Self {
            backend,
            params,
            config,
            opts,
            image_cache: RefCell::new(HashMap::new()),
            proto_cache: RefCell::new(BTreeMap::new()),
        })
    }

    pub fn backend(&self) -> &dyn EncoderBackend {
        self.backend.as_ref()
    }

    pub fn score_options(&self) -> &ScoreOptions {
        &self.opts
    }

    /// Decode, preprocess, and encode an image file, memoized by path.
    pub fn encode_path(&self, path: &Path) -> Result<Arc<PatchTokenMaps>> {
        if let Some(hit) = self.image_cache.borrow().get(path) {
            return Ok(hit.clone());
        }
        let raw = image::open(path).map_err(|e| match e {
            image::ImageError::IoError(io) => Error::Io {
                path: path.to_path_buf(),
                source: io,
            },
            other => Error::InvalidInput(format!("cannot decode {}: {other}", path.display())),
        })?;
        let tensor = preprocess_image(&raw, &self.config.preprocess())?;
        let maps = Arc::new(self.backend.encode_image(&tensor)?);
        self.image_cache
            .borrow_mut()
            .insert(path.to_path_buf(), maps.clone());
        Ok(maps)
    }

    /// Text prototypes for a class label, memoized. The label falls back to
    /// `text_prior.class_label` when the caller passes an empty derivation.
    pub fn prototypes_for(&self, class_label: &str) -> Result<Arc<TextPrototypes>> {
        let label = if !self.config.text_prior.class_label.is_empty() {
            self.config.text_prior.class_label.as_str()
        } else if !class_label.is_empty() {
            class_label
        } else {
            "object"
        };
        if let Some(hit) = self.proto_cache.borrow().get(label) {
            return Ok(hit.clone());
        }
        let bank = match &self.config.text_prior.template_file {
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(io_err(path))?;
                parse_template_file(&text, label)?
            }
            None => build_prompt_bank(label, self.config.prompt_style()?)?,
        };
        let protos = Arc::new(text_prototypes(
            &bank,
            self.backend.as_ref(),
            self.config.text_prior.normalize,
        )?);
        self.proto_cache
            .borrow_mut()
            .insert(label.to_string(), protos.clone());
        Ok(protos)
    }

    /// Score one query against already-encoded features.
    pub fn score_features(
        &self,
        query: &PatchTokenMaps,
        prompts: &[&PatchTokenMaps],
        protos: &TextPrototypes,
    ) -> Result<ScoreBreakdown> {
        score_episode(&self.params, query, prompts, protos, &self.opts)
    }

    /// Score a query image file against prompt image files.
    pub fn score_paths(
        &self,
        query: &Path,
        prompts: &[PathBuf],
        class_label: &str,
    ) -> Result<ScoreBreakdown> {
        if prompts.is_empty() {
            return Err(Error::InvalidInput("at least one prompt image is required".into()));
        }
        let query_maps = self.encode_path(query)?;
        let prompt_maps: Vec<Arc<PatchTokenMaps>> = prompts
            .iter()
            .map(|p| self.encode_path(p))
            .collect::<Result<_>>()?;
        let prompt_refs: Vec<&PatchTokenMaps> = prompt_maps.iter().map(|a| a.as_ref()).collect();
        let protos = self.prototypes_for(class_label)?;
        self.score_features(&query_maps, &prompt_refs, &protos)
    }
}
