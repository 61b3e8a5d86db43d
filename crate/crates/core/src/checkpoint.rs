//! Checkpoints: a JSON manifest plus one blob of little-endian f64 values.
//!
//! A checkpoint is a directory holding `manifest.json` and `params.bin`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const BLOB_FILE: &str = "params.bin";
const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    /// Byte offset into the blob.
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    /// Free-form description of what the checkpoint holds (model kind,
    /// encoder and head configs).
    pub config: serde_json::Value,
    pub vocab_hash: String,
    pub tensors: Vec<TensorEntry>,
}

fn err(dir: &Path, message: impl Into<String>) -> Error {
    Error::Checkpoint {
        path: dir.to_path_buf(),
        message: message.into(),
    }
}

pub fn save(
    dir: &Path,
    config: serde_json::Value,
    vocab_hash: &str,
    params: &ParamStore,
) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut blob = Vec::with_capacity(params.num_values() * 8);
    let mut tensors = Vec::with_capacity(params.len());
    for (name, t) in params.iter() {
        tensors.push(TensorEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            dtype: "f64le".into(),
            offset: blob.len(),
        });
        for v in t.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        config,
        vocab_hash: vocab_hash.to_string(),
        tensors,
    };
    fs::write(dir.join(BLOB_FILE), blob)?;
    fs::write(
        dir.join(MANIFEST_FILE),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST_FILE);
    if !path.exists() {
        return Err(Error::MissingPath(path));
    }
    let manifest: Manifest = serde_json::from_str(&fs::read_to_string(&path)?)
        .map_err(|e| err(dir, format!("bad manifest: {e}")))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(err(
            dir,
            format!("unsupported format version {}", manifest.format_version),
        ));
    }
    Ok(manifest)
}

/// Loads every tensor. When `expected_vocab_hash` is given, a checkpoint
/// written against a different vocabulary is refused.
pub fn load(dir: &Path, expected_vocab_hash: Option<&str>) -> Result<(Manifest, ParamStore)> {
    let manifest = read_manifest(dir)?;
    if let Some(h) = expected_vocab_hash {
        if h != manifest.vocab_hash {
            return Err(err(
                dir,
                format!(
                    "vocabulary hash mismatch: checkpoint {}, expected {h}",
                    manifest.vocab_hash
                ),
            ));
        }
    }
    let blob_path: PathBuf = dir.join(BLOB_FILE);
    if !blob_path.exists() {
        return Err(Error::MissingPath(blob_path));
    }
    let blob = fs::read(&blob_path)?;
    let mut store = ParamStore::new();
    for e in &manifest.tensors {
        if e.dtype != "f64le" {
            return Err(err(
                dir,
                format!("tensor {}: unsupported dtype {}", e.name, e.dtype),
            ));
        }
        let n: usize = e.shape.iter().product();
        let end = e.offset + n * 8;
        if end > blob.len() {
            return Err(err(
                dir,
                format!(
                    "tensor {}: blob ends at byte {}, need {end}",
                    e.name,
                    blob.len()
                ),
            ));
        }
        let data = blob[e.offset..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        let t = Tensor::new(e.shape.clone(), data)
            .map_err(|x| err(dir, format!("tensor {}: {x}", e.name)))?;
        store
            .insert(e.name.clone(), t)
            .map_err(|x| err(dir, x.to_string()))?;
    }
    Ok((manifest, store))
}
