//! Few-shot anomaly detection by in-context residual scoring.
//!
//! One detector is trained on auxiliary data and then scores images from
//! unseen datasets using only a handful of normal example images supplied at
//! inference time. A query is compared against those prompts at two levels:
//! nearest-neighbor cosine residuals between patch token embeddings, and an
//! adapted global-feature residual against the prompt prototype. A text
//! prompt ensemble adds a prior abnormality probability, and a small scoring
//! head fuses everything into the final anomaly score.
//!
//! The encoder is a frozen, pluggable backend. The bundled mock backend
//! hashes image bytes into deterministic embeddings so the whole pipeline is
//! testable and reproducible without model weights.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod image_residual;
pub mod model;
pub mod nn;
pub mod patch_residual;
pub mod persist;
pub mod pipeline;
pub mod scoring;
pub mod synthetic;
pub mod text_prior;
pub mod training;

mod sampling;

pub use checkpoint::{checkpoint_roundtrip, Checkpoint, LossPoint};
pub use config::{LoadedConfig, Provenance, RunConfig};
pub use data::{
    build_protocol, load_manifest, save_manifest, select_prompt_set, DatasetManifest,
    ManifestEntry, NormalSelector, PromptPool, ProtocolMode, ProtocolSpec, Split,
};
pub use encoder::{
    preprocess_image, BackendGeometry, EncoderBackend, ImageTensor, MockBackend, MockConfig,
    PatchTokenMaps, PreprocessConfig,
};
pub use error::{Error, Result};
pub use eval::{evaluate, prompt_diversity_sweep, rank_metrics, EvalReport, PromptSelection};
pub use model::{DetectorParams, ScoreBreakdown};
pub use pipeline::{build_backend, Pipeline};
pub use scoring::{
    anomaly_score, focal_loss, holistic_loss, holistic_map, total_loss, FocalLossConfig,
    HolisticMap, HolisticScorerParams,
};
pub use text_prior::{
    build_prompt_bank, text_prior_score, text_prototypes, PromptBank, PromptStyle, TextPrototypes,
};
pub use training::{fit, sample_episode, train_step, Episode, FitOutcome};
