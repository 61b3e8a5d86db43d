//! An encoder together with its task heads, plus checkpoint persistence.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::corpus::EncodedSequence;
use crate::encoder::{EncoderConfig, EncoderModel};
use crate::error::{Error, Result};
use crate::heads::{RoutedPrediction, TaskHeads};
use crate::params::ParamStore;

const EMBED_BATCH: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    /// Multiclass head only, trained on Positives.
    Multiclass,
    /// Multiclass head plus per-class binary heads, trained jointly.
    MultiTask,
    /// (n + 1)-way multiclass head with Negatives as the extra class.
    OthersBucket,
    /// A multiclass model with binary heads fitted afterwards on its frozen
    /// classification vectors.
    IndependentHeads,
}

#[derive(Clone, Debug, PartialEq)]
pub struct IntentModel {
    pub kind: ModelKind,
    pub encoder: EncoderModel,
    pub heads: TaskHeads,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct ModelMeta {
    kind: ModelKind,
    encoder: EncoderConfig,
    n_classes: usize,
    n_outputs: usize,
    binary: bool,
}

impl IntentModel {
    pub fn new(kind: ModelKind, encoder: EncoderModel, n_classes: usize, seed: u64) -> Result<Self> {
        let d = encoder.config().d_model;
        let heads = match kind {
            ModelKind::Multiclass => TaskHeads::init(d, n_classes, n_classes, false, seed)?,
            ModelKind::MultiTask | ModelKind::IndependentHeads => TaskHeads::multitask(d, n_classes, seed)?,
            ModelKind::OthersBucket => TaskHeads::init(d, n_classes, n_classes + 1, false, seed)?,
        };
        Ok(IntentModel { kind, encoder, heads })
    }

    pub fn n_classes(&self) -> usize {
        self.heads.n_classes()
    }

    pub fn classification_vectors(&self, seqs: &[EncodedSequence]) -> Result<Vec<Vec<f64>>> {
        self.encoder.embed(seqs, EMBED_BATCH)
    }

    /// Score of a case recorded under `class`: the binary head of that class
    /// when the model has binary heads, otherwise the softmax probability
    /// of the class.
    pub fn case_score(&self, u: &[f64], class: usize) -> f64 {
        if self.heads.has_binary() {
            self.heads.accept_prob(u, class)
        } else {
            self.heads.class_probs(u)[class]
        }
    }

    pub fn predict_routed(&self, seq: &EncodedSequence) -> Result<RoutedPrediction> {
        let (u, _) = self.encoder.encode_sequence(seq)?;
        self.heads.route(&u)
    }

    pub fn save(&self, dir: &Path, vocab_hash: &str) -> Result<()> {
        let meta = ModelMeta {
            kind: self.kind,
            encoder: self.encoder.config().clone(),
            n_classes: self.heads.n_classes(),
            n_outputs: self.heads.n_outputs(),
            binary: self.heads.has_binary(),
        };
        let mut store = self.encoder.params().clone();
        store.extend(self.heads.params().clone())?;
        checkpoint::save(dir, serde_json::to_value(meta)?, vocab_hash, &store)
    }

    pub fn load(dir: &Path, vocab_hash: &str) -> Result<Self> {
        let (manifest, store) = checkpoint::load(dir, Some(vocab_hash))?;
        let meta: ModelMeta = serde_json::from_value(manifest.config).map_err(|e| Error::Checkpoint {
            path: dir.to_path_buf(),
            message: format!("not a model checkpoint: {e}"),
        })?;
        let encoder = EncoderModel::from_params(meta.encoder.clone(), &store)?;
        let heads = TaskHeads::from_params(
            meta.encoder.d_model,
            meta.n_classes,
            meta.n_outputs,
            meta.binary,
            &store,
        )?;
        Ok(IntentModel {
            kind: meta.kind,
            encoder,
            heads,
        })
    }
}

/// Saves a bare encoder (with its MLM output bias) as a pretraining
/// checkpoint.
pub fn save_encoder(dir: &Path, encoder: &EncoderModel, extra: &ParamStore, vocab_hash: &str) -> Result<()> {
    let mut store = encoder.params().clone();
    store.extend(extra.clone())?;
    checkpoint::save(
        dir,
        serde_json::json!({ "kind": "encoder", "encoder": encoder.config() }),
        vocab_hash,
        &store,
    )
}

/// Loads an encoder checkpoint, returning the encoder and any non-encoder
/// tensors stored beside it.
pub fn load_encoder(dir: &Path, vocab_hash: &str) -> Result<(EncoderModel, ParamStore)> {
    let (manifest, store) = checkpoint::load(dir, Some(vocab_hash))?;
    let cfg: EncoderConfig = manifest
        .config
        .get("encoder")
        .cloned()
        .ok_or_else(|| Error::Checkpoint {
            path: dir.to_path_buf(),
            message: "manifest has no encoder config".into(),
        })
        .and_then(|v| serde_json::from_value(v).map_err(Error::from))?;
    let encoder = EncoderModel::from_params(cfg, &store)?;
    let mut extra = ParamStore::new();
    for (name, t) in store.iter() {
        if !name.starts_with("encoder.") {
            extra.insert(name, t.clone())?;
        }
    }
    Ok((encoder, extra))
}
