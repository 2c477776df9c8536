//! Checkpoint persistence.
//!
//! A checkpoint is a directory holding a versioned `metadata.json` (backend
//! identifier, config snapshot, training metadata), one binary blob per
//! parameter group, and the loss history as `step,loss` CSV. Parameters
//! round-trip bitwise: blobs store raw little-endian f64 values.

use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::config::RunConfig;
use crate::error::{io_err, Error, Result};
use crate::model::DetectorParams;
use crate::nn::Mlp;
use crate::persist::write_atomic;

const FORMAT_VERSION: u32 = 1;
const BLOB_MAGIC: &[u8; 4] = b"ICKP";

/// One `(step, loss)` sample of the training curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossPoint {
    pub step: usize,
    pub loss: f64,
}

/// Trained parameters plus everything needed to rebuild the pipeline.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub backend_id: String,
    pub params: DetectorParams,
    pub epochs_completed: usize,
    pub seed: u64,
    pub loss_history: Vec<LossPoint>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Metadata {
    version: u32,
    backend_id: String,
    config: RunConfig,
    epochs_completed: usize,
    seed: u64,
}

impl Checkpoint {
    /// Write the checkpoint directory. Every file is written atomically.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
        let metadata = Metadata {
            version: FORMAT_VERSION,
            backend_id: self.backend_id.clone(),
            config: self.config.clone(),
            epochs_completed: self.epochs_completed,
            seed: self.seed,
        };
        let json = serde_json::to_string_pretty(&metadata)
            .map_err(|e| Error::Persistence(format!("metadata serialization failed: {e}")))?;
        write_atomic(&dir.join("metadata.json"), json.as_bytes())?;
        write_atomic(&dir.join("adapter.bin"), &encode_mlp(&self.params.adapter.mlp))?;
        write_atomic(
            &dir.join("classifier.bin"),
            &encode_mlp(&self.params.classifier.mlp),
        )?;
        write_atomic(&dir.join("head.bin"), &encode_mlp(&self.params.scorer.head))?;
        let mut csv = String::from("step,loss\n");
        for p in &self.loss_history {
            csv.push_str(&format!("{},{:.17e}\n", p.step, p.loss));
        }
        write_atomic(&dir.join("loss_history.csv"), csv.as_bytes())
    }

    /// Load a checkpoint directory. Fails closed: any malformed file yields
    /// an incompatible-checkpoint error and nothing partial.
    pub fn load(dir: &Path) -> Result<Self> {
        let meta_path = dir.join("metadata.json");
        let text = std::fs::read_to_string(&meta_path).map_err(io_err(&meta_path))?;
        let metadata: Metadata = serde_json::from_str(&text).map_err(|e| {
            Error::IncompatibleCheckpoint(format!("{}: {e}", meta_path.display()))
        })?;
        if metadata.version != FORMAT_VERSION {
            return Err(Error::IncompatibleCheckpoint(format!(
                "checkpoint format v{} (this build reads v{FORMAT_VERSION})",
                metadata.version
            )));
        }
        metadata.config.validate()?;

        // Blobs are self-describing; shapes come from the file, values are
        // loaded bitwise.
        let params = DetectorParams {
            adapter: crate::image_residual::AdapterParams {
                mlp: load_mlp(&dir.join("adapter.bin"))?,
            },
            classifier: crate::image_residual::ImageClassifierParams {
                mlp: load_mlp(&dir.join("classifier.bin"))?,
            },
            scorer: crate::scoring::HolisticScorerParams {
                head: load_mlp(&dir.join("head.bin"))?,
                alpha: metadata.config.scoring.alpha,
            },
        };

        let loss_history = load_loss_history(&dir.join("loss_history.csv"))?;
        Ok(Self {
            config: metadata.config,
            backend_id: metadata.backend_id,
            params,
            epochs_completed: metadata.epochs_completed,
            seed: metadata.seed,
            loss_history,
        })
    }
}

/// Save then reload, returning the reloaded copy. Parameters compare
/// bitwise equal to the input.
pub fn checkpoint_roundtrip(ckpt: &Checkpoint, dir: &Path) -> Result<Checkpoint> {
    ckpt.save(dir)?;
    Checkpoint::load(dir)
}

fn encode_mlp(mlp: &Mlp) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(BLOB_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(mlp.layers.len() as u32 * 2).to_le_bytes());
    for layer in &mlp.layers {
        let (rows, cols) = layer.weights.dim();
        out.push(2);
        out.extend_from_slice(&(rows as u64).to_le_bytes());
        out.extend_from_slice(&(cols as u64).to_le_bytes());
        for v in layer.weights.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.push(1);
        out.extend_from_slice(&(layer.bias.len() as u64).to_le_bytes());
        for v in layer.bias.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct BlobReader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> BlobReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::IncompatibleCheckpoint(format!(
                "{} is truncated at byte {}",
                self.path.display(),
                self.pos
            )));
        }
        let slice = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn f64_slice(&mut self, count: usize) -> Result<Vec<f64>> {
        let raw = self.take(count * 8)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

fn load_mlp(path: &Path) -> Result<Mlp> {
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    let mut reader = BlobReader {
        bytes: &bytes,
        pos: 0,
        path,
    };
    if reader.take(4)? != BLOB_MAGIC {
        return Err(Error::IncompatibleCheckpoint(format!(
            "{} is not a parameter blob",
            path.display()
        )));
    }
    let version = reader.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::IncompatibleCheckpoint(format!(
            "{} has blob version {version}",
            path.display()
        )));
    }
    let tensor_count = reader.u32()? as usize;
    if tensor_count == 0 || !tensor_count.is_multiple_of(2) {
        return Err(Error::IncompatibleCheckpoint(format!(
            "{} holds {tensor_count} tensors, expected weight/bias pairs",
            path.display()
        )));
    }
    let mut layers = Vec::with_capacity(tensor_count / 2);
    let mut expected_input: Option<usize> = None;
    for _ in 0..tensor_count / 2 {
        let ndim = reader.u8()?;
        if ndim != 2 {
            return Err(Error::IncompatibleCheckpoint(format!(
                "{}: expected a weight matrix, found ndim {ndim}",
                path.display()
            )));
        }
        let rows = reader.u64()? as usize;
        let cols = reader.u64()? as usize;
        if rows == 0 || cols == 0 {
            return Err(Error::IncompatibleCheckpoint(format!(
                "{}: zero-sized weight matrix",
                path.display()
            )));
        }
        if let Some(expected) = expected_input {
            if cols != expected {
                return Err(Error::IncompatibleCheckpoint(format!(
                    "{}: layer input {cols} does not chain from previous output {expected}",
                    path.display()
                )));
            }
        }
        expected_input = Some(rows);
        let values = reader.f64_slice(rows * cols)?;
        let weights = ndarray::Array2::from_shape_vec((rows, cols), values)
            .expect("shape matches value count");
        let ndim = reader.u8()?;
        if ndim != 1 {
            return Err(Error::IncompatibleCheckpoint(format!(
                "{}: expected a bias vector, found ndim {ndim}",
                path.display()
            )));
        }
        let len = reader.u64()? as usize;
        if len != rows {
            return Err(Error::IncompatibleCheckpoint(format!(
                "{}: bias length {len} does not match {rows} outputs",
                path.display()
            )));
        }
        let bias = ndarray::Array1::from_vec(reader.f64_slice(len)?);
        layers.push(crate::nn::DenseLayer { weights, bias });
    }
    if reader.pos != bytes.len() {
        return Err(Error::IncompatibleCheckpoint(format!(
            "{} has {} trailing bytes",
            path.display(),
            bytes.len() - reader.pos
        )));
    }
    Ok(Mlp { layers })
}

fn load_loss_history(path: &Path) -> Result<Vec<LossPoint>> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    let mut points = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        if idx == 0 {
            if line.trim() != "step,loss" {
                return Err(Error::IncompatibleCheckpoint(format!(
                    "{}: bad loss-history header",
                    path.display()
                )));
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let (step, loss) = line.split_once(',').ok_or_else(|| {
            Error::IncompatibleCheckpoint(format!("{}: bad loss row {line:?}", path.display()))
        })?;
        let step = step.trim().parse::<usize>().map_err(|_| {
            Error::IncompatibleCheckpoint(format!("{}: bad step {step:?}", path.display()))
        })?;
        let loss = loss.trim().parse::<f64>().map_err(|_| {
            Error::IncompatibleCheckpoint(format!("{}: bad loss {loss:?}", path.display()))
        })?;
        points.push(LossPoint { step, loss });
    }
    Ok(points)
}
