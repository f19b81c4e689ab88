//! Checkpoint container: a fixed magic, a JSON manifest, then raw
//! little-endian f32 blobs.
//!
//! The manifest lists every stored tensor with its shape and byte offset and
//! echoes the model config plus the run and vocabulary seeds, so evaluation
//! can rebuild the exact vocabulary (including the seeded UNK row) and
//! validate shapes before touching the blobs. Nothing in the file depends on
//! time, so identical runs write identical bytes. A frozen embedding table
//! is not stored; it is reconstructed from the word-vector file and the
//! recorded vocabulary seed.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelConfig, ModelParams};
use crate::corpus::Vocabulary;
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"DIVATT1\n";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    /// Byte offset into the blob section.
    pub offset: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub version: u32,
    /// Blob element type; only f32 is written.
    pub dtype: String,
    pub config: ModelConfig,
    /// Run seed the model was trained under.
    pub seed: u64,
    /// Seed that generated the vocabulary's UNK row.
    pub vocab_seed: u64,
    pub tensors: Vec<TensorEntry>,
}

fn corrupt(path: &Path, msg: impl Into<String>) -> Error {
    Error::Checkpoint(format!("{}: {}", path.display(), msg.into()))
}

pub fn save_checkpoint(path: impl AsRef<Path>, params: &ModelParams, seed: u64, vocab_seed: u64) -> Result<()> {
    let path = path.as_ref();
    // trainable() covers every weight and, when unfrozen, the embedding;
    // a frozen table is rebuilt from the word vectors at load time.
    let stored = params.trainable();
    let mut entries = Vec::with_capacity(stored.len());
    let mut blob = Vec::new();
    for (name, tensor) in &stored {
        entries.push(TensorEntry {
            name: name.to_string(),
            rows: tensor.rows(),
            cols: tensor.cols(),
            offset: blob.len() as u64,
        });
        for &v in tensor.data() {
            blob.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let manifest = CheckpointManifest {
        version: VERSION,
        dtype: "f32".to_string(),
        config: *params.config(),
        seed,
        vocab_seed,
        tensors: entries,
    };
    let manifest_json = serde_json::to_vec(&manifest)
        .map_err(|e| Error::Checkpoint(format!("manifest serialization: {e}")))?;
    let mut bytes = Vec::with_capacity(MAGIC.len() + 4 + manifest_json.len() + blob.len());
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&(manifest_json.len() as u32).to_le_bytes());
    bytes.extend_from_slice(&manifest_json);
    bytes.extend_from_slice(&blob);
    fs::write(path, bytes).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Read just the manifest, e.g. to learn which vocabulary seed to use
/// before loading the weights.
pub fn read_manifest(path: impl AsRef<Path>) -> Result<CheckpointManifest> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    parse_manifest(path, &bytes).map(|(m, _)| m)
}

fn parse_manifest<'a>(path: &Path, bytes: &'a [u8]) -> Result<(CheckpointManifest, &'a [u8])> {
    if bytes.len() < MAGIC.len() + 4 || &bytes[..MAGIC.len()] != MAGIC {
        return Err(corrupt(path, "not a checkpoint (bad magic)"));
    }
    let len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let body = &bytes[12..];
    if body.len() < len {
        return Err(corrupt(path, "truncated manifest"));
    }
    let manifest: CheckpointManifest =
        serde_json::from_slice(&body[..len]).map_err(|e| corrupt(path, format!("manifest: {e}")))?;
    if manifest.version != VERSION {
        return Err(corrupt(path, format!("unsupported version {}", manifest.version)));
    }
    if manifest.dtype != "f32" {
        return Err(corrupt(path, format!("unsupported dtype '{}'", manifest.dtype)));
    }
    Ok((manifest, &body[len..]))
}

/// Load a checkpoint against the vocabulary it was trained with.
pub fn load_checkpoint(path: impl AsRef<Path>, vocab: &Vocabulary) -> Result<(ModelParams, CheckpointManifest)> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let (manifest, blob) = parse_manifest(path, &bytes)?;
    let cfg = manifest.config;
    if cfg.vocab_size != vocab.size() || cfg.dim != vocab.dim() {
        return Err(corrupt(
            path,
            format!(
                "vocabulary mismatch: checkpoint {}x{}, loaded {}x{}",
                cfg.vocab_size,
                cfg.dim,
                vocab.size(),
                vocab.dim()
            ),
        ));
    }
    let mut params = ModelParams::init(cfg, vocab.embeddings().clone(), manifest.seed)?;
    let mut slots = params.trainable_mut();
    let mut filled = vec![false; slots.len()];
    for entry in &manifest.tensors {
        let idx = slots
            .iter()
            .position(|(name, _)| *name == entry.name)
            .ok_or_else(|| corrupt(path, format!("unexpected tensor '{}'", entry.name)))?;
        let slot = &mut slots[idx].1;
        if (slot.rows(), slot.cols()) != (entry.rows, entry.cols) {
            return Err(corrupt(
                path,
                format!(
                    "tensor '{}' is {}x{}, expected {}x{}",
                    entry.name,
                    entry.rows,
                    entry.cols,
                    slot.rows(),
                    slot.cols()
                ),
            ));
        }
        let start = entry.offset as usize;
        let end = start + 4 * entry.rows * entry.cols;
        if end > blob.len() {
            return Err(corrupt(path, format!("tensor '{}' runs past end of file", entry.name)));
        }
        for (i, chunk) in blob[start..end].chunks_exact(4).enumerate() {
            slot.data_mut()[i] = f32::from_le_bytes(chunk.try_into().unwrap()) as f64;
        }
        filled[idx] = true;
    }
    if let Some(missing) = filled.iter().position(|&f| !f) {
        let name = slots[missing].0;
        return Err(corrupt(path, format!("missing tensor '{name}'")));
    }
    drop(slots);
    Ok((params, manifest))
}
