//! Frozen vision-language encoder abstraction.
//!
//! The pipeline only ever consumes multi-layer patch token maps, a global
//! image embedding, and text embeddings. Everything downstream is backend
//! agnostic: the bundled [`MockBackend`] hashes input bytes into seeded
//! pseudo-random embeddings so the full pipeline is testable without model
//! weights, while [`EncoderBackend`] is the adapter point for a real
//! CLIP-style backbone.

mod mock;
mod preprocess;

pub use mock::{MockBackend, MockConfig};
pub use preprocess::{preprocess_image, PreprocessConfig, CLIP_MEAN, CLIP_STD};

use ndarray::{Array1, Array3};

use crate::error::{Error, Result};

/// A preprocessed image: standardized pixels with shape `(3, H, W)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    pixels: Array3<f64>,
}

impl ImageTensor {
    /// Wrap a `(3, H, W)` tensor, enforcing squareness and finiteness.
    pub fn new(pixels: Array3<f64>) -> Result<Self> {
        let (c, h, w) = pixels.dim();
        if c != 3 {
            return Err(Error::InvalidInput(format!(
                "image tensor must have 3 channels, got {c}"
            )));
        }
        if h == 0 || w == 0 {
            return Err(Error::InvalidInput("zero-sized image tensor".into()));
        }
        if h != w {
            return Err(Error::InvalidInput(format!(
                "image tensor must be square, got {h}x{w}"
            )));
        }
        if pixels.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("non-finite pixel value".into()));
        }
        Ok(Self { pixels })
    }

    pub fn resolution(&self) -> usize {
        self.pixels.dim().1
    }

    pub fn pixels(&self) -> &Array3<f64> {
        &self.pixels
    }

    /// Raw little-endian bytes of the pixel data, in memory order.
    /// This is the identity the mock backend hashes.
    pub fn byte_repr(&self) -> Vec<u8> {
        let mut bytes = Vec::with_capacity(self.pixels.len() * 8);
        for v in self.pixels.iter() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        bytes
    }
}

/// Multi-layer patch token maps plus the global class embedding for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchTokenMaps {
    layers: Vec<Array3<f64>>,
    class_embedding: Array1<f64>,
}

impl PatchTokenMaps {
    pub fn new(layers: Vec<Array3<f64>>, class_embedding: Array1<f64>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Contract("patch token maps need at least one layer".into()));
        }
        let dim = layers[0].dim();
        for (i, layer) in layers.iter().enumerate() {
            if layer.dim() != dim {
                return Err(Error::Contract(format!(
                    "layer {i} has shape {:?}, expected {:?}",
                    layer.dim(),
                    dim
                )));
            }
            if layer.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!("non-finite patch embedding in layer {i}")));
            }
        }
        if class_embedding.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite class embedding".into()));
        }
        Ok(Self {
            layers,
            class_embedding,
        })
    }

    pub fn layers(&self) -> &[Array3<f64>] {
        &self.layers
    }

    pub fn layer_count(&self) -> usize {
        self.layers.len()
    }

    /// Shared `(h, w, d)` of every layer grid.
    pub fn grid_shape(&self) -> (usize, usize, usize) {
        self.layers[0].dim()
    }

    pub fn class_embedding(&self) -> &Array1<f64> {
        &self.class_embedding
    }
}

/// Static shape information for one backend.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BackendGeometry {
    /// `(h, w)` of each patch token grid.
    pub patch_grid: (usize, usize),
    /// Patch token embedding width (`d`).
    pub patch_dim: usize,
    /// Class/text embedding width (`d'`).
    pub global_dim: usize,
    /// Number of encoder blocks exposed as token maps (`n`).
    pub layer_count: usize,
    /// Expected input resolution (square).
    pub resolution: usize,
}

impl BackendGeometry {
    /// Geometry of the default real backbone (ViT-B/16+ at 240x240):
    /// a 15x15 patch grid, i.e. 225 patches per layer.
    pub fn vit_b16_plus() -> Self {
        Self {
            patch_grid: (15, 15),
            patch_dim: 896,
            global_dim: 896,
            layer_count: 12,
            resolution: 240,
        }
    }

    pub fn patch_count(&self) -> usize {
        self.patch_grid.0 * self.patch_grid.1
    }
}

/// A frozen encoder. Implementations must be deterministic: identical input
/// bytes produce bitwise-identical embeddings, and nothing is ever mutated,
/// so encode calls are safe from any number of threads.
pub trait EncoderBackend: Send + Sync {
    /// Stable identifier persisted into checkpoints as a compatibility guard.
    fn identifier(&self) -> &str;

    fn geometry(&self) -> BackendGeometry;

    /// Encode a preprocessed image into per-layer patch grids plus the
    /// global class embedding.
    fn encode_image(&self, image: &ImageTensor) -> Result<PatchTokenMaps>;

    /// Encode a nonempty text prompt into a `global_dim` vector.
    fn encode_text(&self, prompt: &str) -> Result<Array1<f64>>;

    /// [`EncoderBackend::encode_text`] followed by L2 normalization.
    fn encode_text_normalized(&self, prompt: &str) -> Result<Array1<f64>> {
        let v = self.encode_text(prompt)?;
        let norm = v.dot(&v).sqrt();
        if norm == 0.0 {
            return Err(Error::Numeric(format!(
                "text embedding for {prompt:?} has zero norm"
            )));
        }
        Ok(v / norm)
    }
}

/// Supported backend selectors for the `encoder.backend` config key.
pub const BACKEND_MOCK: &str = "mock";
pub const BACKEND_EXTERNAL: &str = "external";
