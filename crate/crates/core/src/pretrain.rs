//! Masked-language-model pretraining and the generic / domain / task
//! adaptation stages.

use std::fmt;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{EncodedSequence, CLS, MASK, PAD, SPECIALS};
use crate::encoder::EncoderModel;
use crate::error::{Error, Result};
use crate::params::{Bound, ParamStore};
use crate::rng;
use crate::tensor::{adam_step, clip_grad_norm, AdamConfig, AdamState, Graph, Tensor, Var};

/// One sequence after masking. `labels[i]` holds the original id at every
/// masked position and `None` elsewhere.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskedSequence {
    pub input: EncodedSequence,
    pub labels: Vec<Option<usize>>,
}

impl MaskedSequence {
    pub fn positions(&self) -> impl Iterator<Item = usize> + '_ {
        self.labels
            .iter()
            .enumerate()
            .filter_map(|(i, l)| l.map(|_| i))
    }

    pub fn n_masked(&self) -> usize {
        self.labels.iter().filter(|l| l.is_some()).count()
    }
}

/// A batch of masked sequences.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MlmBatch {
    pub sequences: Vec<MaskedSequence>,
}

impl MlmBatch {
    pub fn n_masked(&self) -> usize {
        self.sequences.iter().map(MaskedSequence::n_masked).sum()
    }
}

/// Selects each real non-`[CLS]` position with probability `rate`; selected
/// positions become `[MASK]` 80% of the time, a random non-special token 10%,
/// and stay unchanged 10%.
pub fn mask_tokens(
    seq: &EncodedSequence,
    rate: f64,
    vocab_size: usize,
    rng: &mut impl Rng,
) -> Result<MaskedSequence> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(Error::invalid(format!(
            "mask rate must be in [0, 1], got {rate}"
        )));
    }
    if vocab_size <= SPECIALS.len() {
        return Err(Error::invalid(format!(
            "vocabulary of {vocab_size} has no regular tokens"
        )));
    }
    let mut ids = seq.ids().to_vec();
    let mut labels = vec![None; ids.len()];
    for i in 0..seq.len() {
        if ids[i] == CLS || ids[i] == PAD || !rng.random_bool(rate) {
            continue;
        }
        labels[i] = Some(ids[i]);
        let r: f64 = rng.random();
        if r < 0.8 {
            ids[i] = MASK;
        } else if r < 0.9 {
            ids[i] = rng.random_range(SPECIALS.len()..vocab_size);
        }
    }
    Ok(MaskedSequence {
        input: EncodedSequence::new(ids, seq.len())?,
        labels,
    })
}

/// Output bias of the MLM head. The projection itself is the transposed
/// token-embedding matrix of the encoder.
#[derive(Clone, Debug, PartialEq)]
pub struct MlmHead {
    params: ParamStore,
}

impl MlmHead {
    pub fn new(vocab_size: usize) -> Self {
        let mut params = ParamStore::new();
        params
            .insert("mlm.bias", Tensor::zeros(&[vocab_size]))
            .expect("fresh store");
        MlmHead { params }
    }

    pub fn from_params(vocab_size: usize, store: &ParamStore) -> Result<Self> {
        match store.get("mlm.bias") {
            Some(t) if t.shape() == [vocab_size] => {
                let mut params = ParamStore::new();
                params.insert("mlm.bias", t.clone())?;
                Ok(MlmHead { params })
            }
            Some(t) => Err(Error::shape(
                "mlm_head",
                format!("bias {:?} for vocabulary {vocab_size}", t.shape()),
            )),
            None => Ok(MlmHead::new(vocab_size)),
        }
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }
}

/// Mean cross-entropy at the labelled positions of `batch`, given token
/// states `[batch * seq, d]`, the token-embedding table used as the output
/// projection, and the output bias.
pub fn masked_cross_entropy(
    g: &mut Graph,
    states: Var,
    seq: usize,
    tok_emb: Var,
    bias: Var,
    batch: &MlmBatch,
) -> Result<Var> {
    if batch.n_masked() == 0 {
        return Err(Error::invalid("MLM batch has no masked positions"));
    }
    let mut rows = Vec::new();
    let mut targets = Vec::new();
    for (b, s) in batch.sequences.iter().enumerate() {
        for pos in s.positions() {
            rows.push(b * seq + pos);
            targets.push(s.labels[pos].expect("masked position has a label"));
        }
    }
    let h = g.gather_rows(states, &rows)?;
    let et = g.transpose(tok_emb)?;
    let logits = g.matmul(h, et)?;
    let logits = g.add_bias(logits, bias)?;
    let ce = g.cross_entropy_rows(logits, &targets)?;
    g.reduce_mean(ce)
}

/// Mean cross-entropy over masked positions, recorded on `g`.
pub fn mlm_loss_graph(
    g: &mut Graph,
    model: &EncoderModel,
    enc: &Bound,
    head: &Bound,
    batch: &MlmBatch,
    dropout_rng: Option<&mut ChaCha8Rng>,
) -> Result<Var> {
    if batch.n_masked() == 0 {
        return Err(Error::invalid("MLM batch has no masked positions"));
    }
    let inputs: Vec<EncodedSequence> = batch.sequences.iter().map(|s| s.input.clone()).collect();
    let out = model.forward(g, enc, &inputs, dropout_rng)?;
    masked_cross_entropy(
        g,
        out.states,
        out.seq,
        model.tok_emb(enc),
        head.get(0),
        batch,
    )
}

/// Mean cross-entropy over the masked positions of `batch`, no dropout.
pub fn mlm_loss(model: &EncoderModel, head: &MlmHead, batch: &MlmBatch) -> Result<f64> {
    let mut g = Graph::new();
    let enc = model.bind(&mut g, false);
    let hb = head.params.bind(&mut g, false);
    let loss = mlm_loss_graph(&mut g, model, &enc, &hb, batch, None)?;
    Ok(g.item(loss))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Generic,
    Dapt,
    Tapt,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Generic => "generic",
            Stage::Dapt => "dapt",
            Stage::Tapt => "tapt",
        })
    }
}

/// Hyperparameters shared by every pretraining stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub generic_epochs: usize,
    pub dapt_epochs: usize,
    pub tapt_epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub mask_rate: f64,
    /// Sequences drawn per epoch; 0 means the whole corpus.
    pub max_sequences_per_epoch: usize,
    /// Held-out sequences scored after each epoch.
    pub heldout_sequences: usize,
    pub clip_norm: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            generic_epochs: 20,
            dapt_epochs: 10,
            tapt_epochs: 5,
            lr: 2e-3,
            batch_size: 32,
            mask_rate: 0.15,
            max_sequences_per_epoch: 0,
            heldout_sequences: 400,
            clip_norm: 1.0,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0)
            || self.batch_size == 0
            || !(0.0..1.0).contains(&self.mask_rate)
            || self.mask_rate == 0.0
        {
            return Err(Error::Config(format!(
                "pretrain: need lr > 0, batch_size >= 1, 0 < mask_rate < 1 (got {}, {}, {})",
                self.lr, self.batch_size, self.mask_rate
            )));
        }
        Ok(())
    }

    pub fn epochs(&self, stage: Stage) -> usize {
        match stage {
            Stage::Generic => self.generic_epochs,
            Stage::Dapt => self.dapt_epochs,
            Stage::Tapt => self.tapt_epochs,
        }
    }
}

/// One stage of the schedule.
#[derive(Clone, Debug, PartialEq)]
pub struct PretrainPlan {
    pub stage: Stage,
    pub epochs: usize,
    pub config: PretrainConfig,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub stage: Stage,
    pub train_loss: f64,
    pub heldout_loss: f64,
}

/// Masks a fixed subset of `seqs` with a fixed seed, so that repeated
/// evaluations see the same positions.
pub fn fixed_mask(
    seqs: &[EncodedSequence],
    rate: f64,
    vocab_size: usize,
    seed: u64,
) -> Result<MlmBatch> {
    let mut r = rng::stream(seed, "mlm.heldout");
    let mut sequences = Vec::with_capacity(seqs.len());
    for s in seqs {
        sequences.push(mask_tokens(s, rate, vocab_size, &mut r)?);
    }
    Ok(MlmBatch { sequences })
}

/// Mean masked cross-entropy over a pre-masked held-out set, averaged per
/// masked token.
pub fn heldout_loss(
    model: &EncoderModel,
    head: &MlmHead,
    heldout: &MlmBatch,
    batch_size: usize,
) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for chunk in heldout.sequences.chunks(batch_size.max(1)) {
        let b = MlmBatch {
            sequences: chunk.to_vec(),
        };
        let n = b.n_masked();
        if n == 0 {
            continue;
        }
        total += mlm_loss(model, head, &b)? * n as f64;
        count += n;
    }
    if count == 0 {
        return Err(Error::invalid("held-out set has no masked positions"));
    }
    Ok(total / count as f64)
}

/// exp of the mean masked cross-entropy under fixed-seed masking.
pub fn masked_perplexity(
    model: &EncoderModel,
    head: &MlmHead,
    heldout: &[EncodedSequence],
    rate: f64,
    seed: u64,
) -> Result<f64> {
    if heldout.is_empty() {
        return Err(Error::invalid("masked_perplexity: empty corpus"));
    }
    let batch = fixed_mask(heldout, rate, model.config().vocab_size, seed)?;
    Ok(heldout_loss(model, head, &batch, 64)?.exp())
}

fn draw_batch(
    corpus: &[EncodedSequence],
    idx: &[usize],
    rate: f64,
    vocab: usize,
    rng: &mut ChaCha8Rng,
) -> Result<MlmBatch> {
    loop {
        let mut sequences = Vec::with_capacity(idx.len());
        for &i in idx {
            sequences.push(mask_tokens(&corpus[i], rate, vocab, rng)?);
        }
        let b = MlmBatch { sequences };
        // zero masked positions is possible for tiny batches; redraw
        if b.n_masked() > 0 {
            return Ok(b);
        }
    }
}

/// Trains `model` and `head` with the MLM objective on `corpus`, scoring
/// `heldout` after every epoch. Returns one entry per epoch.
pub fn run_pretraining(
    model: &mut EncoderModel,
    head: &mut MlmHead,
    plan: &PretrainPlan,
    corpus: &[EncodedSequence],
    heldout: &[EncodedSequence],
) -> Result<Vec<EpochLoss>> {
    let cfg = &plan.config;
    cfg.validate()?;
    if corpus.is_empty() {
        return Err(Error::invalid(format!(
            "{} pretraining: empty corpus",
            plan.stage
        )));
    }
    if plan.epochs == 0 {
        return Ok(Vec::new());
    }
    let vocab = model.config().vocab_size;
    let eval_set = if heldout.is_empty() {
        None
    } else {
        let n = cfg.heldout_sequences.min(heldout.len()).max(1);
        Some(fixed_mask(&heldout[..n], cfg.mask_rate, vocab, plan.seed)?)
    };
    let label = format!("pretrain.{}", plan.stage);
    let mut r = rng::stream(plan.seed, &label);
    let adam = AdamConfig {
        lr: cfg.lr,
        ..Default::default()
    };
    let mut state = AdamState::new(
        model
            .params()
            .iter()
            .chain(head.params().iter())
            .map(|(_, t)| t),
    );
    let per_epoch = if cfg.max_sequences_per_epoch == 0 {
        corpus.len()
    } else {
        cfg.max_sequences_per_epoch.min(corpus.len())
    };

    let mut order: Vec<usize> = (0..corpus.len()).collect();
    let mut cursor = corpus.len();
    let mut history = Vec::with_capacity(plan.epochs);
    for epoch in 1..=plan.epochs {
        let mut loss_sum = 0.0;
        let mut steps = 0usize;
        let mut drawn = 0;
        while drawn < per_epoch {
            let take = cfg.batch_size.min(per_epoch - drawn);
            let mut idx = Vec::with_capacity(take);
            while idx.len() < take {
                if cursor == order.len() {
                    order.shuffle(&mut r);
                    cursor = 0;
                }
                idx.push(order[cursor]);
                cursor += 1;
            }
            drawn += take;
            let batch = draw_batch(corpus, &idx, cfg.mask_rate, vocab, &mut r)?;

            let mut g = Graph::new();
            let enc = model.bind(&mut g, true);
            let hb = head.params.bind(&mut g, true);
            let loss = mlm_loss_graph(&mut g, model, &enc, &hb, &batch, Some(&mut r))?;
            loss_sum += g.item(loss);
            steps += 1;
            let grads = g.backward(loss)?;
            model.params_mut().accumulate(&grads, &enc)?;
            head.params.accumulate(&grads, &hb)?;
            let mut ts: Vec<&mut Tensor> = model
                .params_mut()
                .tensors_mut()
                .chain(head.params.tensors_mut())
                .collect();
            if cfg.clip_norm > 0.0 {
                clip_grad_norm(&mut ts, cfg.clip_norm);
            }
            adam_step(&mut ts, &mut state, &adam)?;
            ts.iter_mut().for_each(|t| t.zero_grad());
        }
        let heldout_loss = match &eval_set {
            Some(b) => heldout_loss(model, head, b, 64)?,
            None => f64::NAN,
        };
        let train_loss = loss_sum / steps as f64;
        log::info!(
            "{} epoch {epoch}: train {train_loss:.4} heldout {heldout_loss:.4}",
            plan.stage
        );
        history.push(EpochLoss {
            epoch,
            stage: plan.stage,
            train_loss,
            heldout_loss,
        });
    }
    Ok(history)
}

pub fn write_loss_history(path: &Path, history: &[EpochLoss]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for e in history {
        w.serialize(e)?;
    }
    w.flush()?;
    Ok(())
}
