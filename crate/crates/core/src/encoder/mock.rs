//! Deterministic mock encoder.
//!
//! Embeddings are derived by hashing the input bytes (together with the
//! backend identifier and seed) into a ChaCha8 stream, then expanding that
//! stream into uniform values on [-1, 1]. The result behaves like a frozen
//! encoder: pure, platform-stable, and wildly sensitive to any input change.

use ndarray::{Array1, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{BackendGeometry, EncoderBackend, ImageTensor, PatchTokenMaps};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MockConfig {
    /// Number of patch-token layers (`n`).
    pub layers: usize,
    /// Side length of the square patch grid (`h = w`).
    pub grid: usize,
    /// Patch embedding width (`d`).
    pub patch_dim: usize,
    /// Class/text embedding width (`d'`).
    pub global_dim: usize,
    /// Stream seed; part of the backend identity.
    pub seed: u64,
    /// Expected input resolution.
    pub resolution: usize,
}

impl Default for MockConfig {
    fn default() -> Self {
        Self {
            layers: 3,
            grid: 4,
            patch_dim: 8,
            global_dim: 16,
            seed: 0,
            resolution: 240,
        }
    }
}

/// Hash-seeded mock backend. Immutable after construction.
#[derive(Debug, Clone)]
pub struct MockBackend {
    config: MockConfig,
    identifier: String,
}

impl MockBackend {
    pub fn new(config: MockConfig) -> Result<Self> {
        if config.layers == 0
            || config.grid == 0
            || config.patch_dim == 0
            || config.global_dim == 0
            || config.resolution == 0
        {
            return Err(Error::Config(format!("mock backend geometry must be positive: {config:?}")));
        }
        let identifier = format!(
            "mock-n{}-g{}-d{}-d{}-s{}",
            config.layers, config.grid, config.patch_dim, config.global_dim, config.seed
        );
        Ok(Self { config, identifier })
    }

    pub fn config(&self) -> &MockConfig {
        &self.config
    }

    fn stream_for(&self, tag: u8, payload: &[u8]) -> ChaCha8Rng {
        let mut hasher = Sha256::new();
        hasher.update(self.identifier.as_bytes());
        hasher.update(self.config.seed.to_le_bytes());
        hasher.update([tag]);
        hasher.update(payload);
        let digest = hasher.finalize();
        let mut seed = [0u8; 32];
        seed.copy_from_slice(&digest);
        ChaCha8Rng::from_seed(seed)
    }
}

fn uniform_pm1(rng: &mut ChaCha8Rng) -> f64 {
    rng.random::<f64>() * 2.0 - 1.0
}

impl EncoderBackend for MockBackend {
    fn identifier(&self) -> &str {
        &self.identifier
    }

    fn geometry(&self) -> BackendGeometry {
        BackendGeometry {
            patch_grid: (self.config.grid, self.config.grid),
            patch_dim: self.config.patch_dim,
            global_dim: self.config.global_dim,
            layer_count: self.config.layers,
            resolution: self.config.resolution,
        }
    }

    fn encode_image(&self, image: &ImageTensor) -> Result<PatchTokenMaps> {
        if image.resolution() != self.config.resolution {
            return Err(Error::Contract(format!(
                "backend expects {}x{} input, got {}x{}",
                self.config.resolution,
                self.config.resolution,
                image.resolution(),
                image.resolution()
            )));
        }
        let mut rng = self.stream_for(0, &image.byte_repr());
        let g = self.config.grid;
        let d = self.config.patch_dim;
        let mut layers = Vec::with_capacity(self.config.layers);
        for _ in 0..self.config.layers {
            layers.push(Array3::from_shape_fn((g, g, d), |_| uniform_pm1(&mut rng)));
        }
        let class_embedding = Array1::from_shape_fn(self.config.global_dim, |_| uniform_pm1(&mut rng));
        PatchTokenMaps::new(layers, class_embedding)
    }

    fn encode_text(&self, prompt: &str) -> Result<Array1<f64>> {
        if prompt.is_empty() {
            return Err(Error::InvalidInput("empty text prompt".into()));
        }
        let mut rng = self.stream_for(1, prompt.as_bytes());
        Ok(Array1::from_shape_fn(self.config.global_dim, |_| uniform_pm1(&mut rng)))
    }
}
