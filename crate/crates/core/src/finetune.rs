//! Supervised fine-tuning: the multi-task model trained end to end, the
//! positives-only multiclass baseline, the Others-bucket variant, and
//! logistic-regression binary heads fitted on a frozen baseline.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{hex, EncodedSequence, TaskDataView, Vocabulary};
use crate::encoder::EncoderModel;
use crate::error::{Error, Result};
use crate::eval::{build_report, EvalSet};
use crate::heads::{TaskFilter, TaskHeads, TaskLabel};
use crate::model::{IntentModel, ModelKind};
use crate::rng;
use crate::tensor::{adam_step, clip_grad_norm, AdamConfig, AdamState, Graph, Tensor};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Batching {
    /// Every batch mixes examples of all tasks under the joint loss.
    #[default]
    Mixed,
    /// Every batch belongs to a single task: the multiclass task or one
    /// class's binary task.
    PerTask,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    Constant,
    /// Linear warmup over `warmup_fraction` of the step budget, then linear
    /// decay to zero at the last step of the last epoch.
    #[default]
    WarmupLinear,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub lr: f64,
    pub schedule: LrSchedule,
    pub warmup_fraction: f64,
    pub batch_size: usize,
    /// Epochs without a dev improvement before stopping.
    pub patience: usize,
    pub batching: Batching,
    pub freeze_encoder: bool,
    pub clip_norm: f64,
    /// Adam settings for the post-hoc logistic-regression heads.
    pub head_lr: f64,
    pub head_steps: usize,
    /// Inverse L2 strength of those heads, in the usual logistic-regression
    /// convention: the mean loss gets `|w|^2 / (2 C N)` added.
    pub head_c: f64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            epochs: 15,
            lr: 1e-3,
            schedule: LrSchedule::WarmupLinear,
            warmup_fraction: 0.1,
            batch_size: 32,
            patience: 3,
            batching: Batching::Mixed,
            freeze_encoder: false,
            clip_norm: 1.0,
            head_lr: 0.05,
            head_steps: 8000,
            head_c: 1000.0,
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("finetune.batch_size must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || !(self.head_lr > 0.0 && self.head_lr.is_finite()) {
            return Err(Error::Config("finetune learning rates must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return Err(Error::Config("finetune.warmup_fraction must lie in [0, 1)".into()));
        }
        if !(self.head_c > 0.0) {
            return Err(Error::Config("finetune.head_c must be positive".into()));
        }
        if self.patience == 0 {
            return Err(Error::Config("finetune.patience must be at least 1".into()));
        }
        if self.clip_norm < 0.0 {
            return Err(Error::Config("finetune.clip_norm must be non-negative".into()));
        }
        Ok(())
    }
}

/// Encoded training examples with their supervision.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainSet {
    pub ids: Vec<String>,
    pub seqs: Vec<EncodedSequence>,
    pub labels: Vec<TaskLabel>,
}

impl TrainSet {
    /// Every curated record of the view: Positives and Negatives, ordered
    /// by class and then by record order.
    pub fn curated(view: &TaskDataView, vocab: &Vocabulary, max_len: usize) -> Result<Self> {
        let mut set = TrainSet::default();
        for k in 0..view.n_classes() {
            for &(i, y) in view.binary_pool(k) {
                let label = if y { TaskLabel::positive(k) } else { TaskLabel::negative(k) };
                let r = view.record(i);
                set.push(r.id.clone(), vocab.encode(&r.text, max_len)?, label);
            }
        }
        Ok(set)
    }

    pub fn push(&mut self, id: String, seq: EncodedSequence, label: TaskLabel) {
        self.ids.push(id);
        self.seqs.push(seq);
        self.labels.push(label);
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn has_negatives(&self) -> bool {
        self.labels.iter().any(|l| !l.accepted)
    }

    /// Order-sensitive SHA-256 over the examples that reach a binary head.
    pub fn binary_pool_hash(&self) -> String {
        let mut h = Sha256::new();
        for (id, l) in self.ids.iter().zip(&self.labels).filter(|(_, l)| l.binary) {
            h.update(id.as_bytes());
            h.update([0]);
            h.update((l.class as u64).to_le_bytes());
            h.update([u8::from(l.accepted)]);
        }
        hex(&h.finalize())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub dev_average: Option<f64>,
    pub dev_weighted_average: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct Finetuned {
    /// The model from the best dev epoch.
    pub model: IntentModel,
    pub history: Vec<EpochMetrics>,
    pub best_epoch: usize,
}

/// What one batch optimizes.
#[derive(Clone, Debug)]
enum Batch {
    Joint(Vec<usize>, TaskFilter),
    Multiclass(Vec<usize>),
}

/// Multiclass target of an example for a model of `kind` with `n`
/// intents: accepted examples keep their class, Negatives map to the extra
/// bucket `n` for the Others variant and are dropped otherwise.
pub fn multiclass_target(kind: ModelKind, label: &TaskLabel, n: usize) -> Option<usize> {
    match (kind, label.accepted) {
        (_, true) => Some(label.class),
        (ModelKind::OthersBucket, false) => Some(n),
        _ => None,
    }
}

fn plan_epoch(kind: ModelKind, train: &TrainSet, cfg: &FinetuneConfig, n: usize, r: &mut impl rand::Rng) -> Vec<Batch> {
    let chunk = |mut idx: Vec<usize>, r: &mut _| -> Vec<Vec<usize>> {
        idx.shuffle(r);
        idx.chunks(cfg.batch_size).map(<[usize]>::to_vec).collect()
    };
    match kind {
        ModelKind::MultiTask => match cfg.batching {
            Batching::Mixed => chunk((0..train.len()).collect(), r)
                .into_iter()
                .map(|b| Batch::Joint(b, TaskFilter::All))
                .collect(),
            Batching::PerTask => {
                let mut batches = Vec::new();
                let multi: Vec<usize> = (0..train.len()).filter(|&i| train.labels[i].accepted).collect();
                batches.extend(chunk(multi, r).into_iter().map(|b| Batch::Joint(b, TaskFilter::Multiclass)));
                for k in 0..n {
                    let idx: Vec<usize> = (0..train.len())
                        .filter(|&i| train.labels[i].binary && train.labels[i].class == k)
                        .collect();
                    batches.extend(chunk(idx, r).into_iter().map(|b| Batch::Joint(b, TaskFilter::Binary(k))));
                }
                batches.shuffle(r);
                batches
            }
        },
        _ => {
            let idx: Vec<usize> = (0..train.len())
                .filter(|&i| multiclass_target(kind, &train.labels[i], n).is_some())
                .collect();
            chunk(idx, r).into_iter().map(Batch::Multiclass).collect()
        }
    }
}

fn train_step(
    model: &mut IntentModel,
    train: &TrainSet,
    batch: &Batch,
    cfg: &FinetuneConfig,
    state: &mut AdamState,
    adam: &AdamConfig,
    r: &mut rand_chacha::ChaCha8Rng,
) -> Result<f64> {
    let idx = match batch {
        Batch::Joint(i, _) | Batch::Multiclass(i) => i,
    };
    let seqs: Vec<EncodedSequence> = idx.iter().map(|&i| train.seqs[i].clone()).collect();
    let mut g = Graph::new();
    let enc = model.encoder.bind(&mut g, !cfg.freeze_encoder);
    let hb = model.heads.bind(&mut g, true);
    let out = model.encoder.forward(&mut g, &enc, &seqs, Some(r))?;
    let loss = match batch {
        Batch::Joint(_, filter) => {
            let labels: Vec<TaskLabel> = idx.iter().map(|&i| train.labels[i]).collect();
            model.heads.joint_loss_graph(&mut g, &hb, out.cls, &labels, *filter)?.0
        }
        Batch::Multiclass(_) => {
            let n = model.n_classes();
            let targets: Vec<usize> = idx
                .iter()
                .map(|&i| multiclass_target(model.kind, &train.labels[i], n).expect("planned"))
                .collect();
            model.heads.multiclass_loss_graph(&mut g, &hb, out.cls, &targets)?
        }
    };
    let value = g.item(loss);
    if !value.is_finite() {
        return Err(Error::NonFinite { op: "finetune loss" });
    }
    let grads = g.backward(loss)?;
    model.heads.params_mut().accumulate(&grads, &hb)?;
    let mut ts: Vec<&mut Tensor> = if cfg.freeze_encoder {
        model.heads.params_mut().tensors_mut().collect()
    } else {
        model.encoder.params_mut().accumulate(&grads, &enc)?;
        model
            .encoder
            .params_mut()
            .tensors_mut()
            .chain(model.heads.params_mut().tensors_mut())
            .collect()
    };
    if cfg.clip_norm > 0.0 {
        clip_grad_norm(&mut ts, cfg.clip_norm);
    }
    adam_step(&mut ts, state, adam)?;
    ts.iter_mut().for_each(|t| t.zero_grad());
    Ok(value)
}

/// Learning rate of optimizer step `step` (0-based) out of `budget`.
pub fn scheduled_lr(cfg: &FinetuneConfig, step: usize, budget: usize) -> f64 {
    match cfg.schedule {
        LrSchedule::Constant => cfg.lr,
        LrSchedule::WarmupLinear => {
            let budget = budget.max(1) as f64;
            let warmup = (cfg.warmup_fraction * budget).max(1.0);
            let t = step as f64 + 1.0;
            let f = if t <= warmup { t / warmup } else { (budget - t + 1.0) / (budget - warmup + 1.0) };
            cfg.lr * f.clamp(0.0, 1.0)
        }
    }
}

/// Trains `model` on `train` and returns the model of the best dev epoch
/// (by average AUC ROC), stopping after `patience` epochs without gain.
pub fn finetune(mut model: IntentModel, train: &TrainSet, dev: &EvalSet, cfg: &FinetuneConfig, seed: u64) -> Result<Finetuned> {
    cfg.validate()?;
    let n = model.n_classes();
    if let Some(l) = train.labels.iter().find(|l| l.class >= n) {
        return Err(Error::invalid(format!("training label class {} outside {n} classes", l.class)));
    }
    match model.kind {
        ModelKind::IndependentHeads => {
            return Err(Error::invalid("independent heads are fitted with train_independent_heads"));
        }
        ModelKind::MultiTask => {
            if !model.heads.has_binary() {
                return Err(Error::invalid("multi-task model without binary heads"));
            }
            if !train.has_negatives() {
                log::warn!("no Negatives in any class: binary heads only see positive targets");
            }
        }
        _ => {}
    }
    let classes: BTreeSet<usize> = train
        .labels
        .iter()
        .filter_map(|l| multiclass_target(model.kind, l, n))
        .collect();
    if classes.len() < 2 {
        return Err(Error::invalid(format!(
            "{:?} training needs examples of at least 2 classes, found {}",
            model.kind,
            classes.len()
        )));
    }

    let mut r = rng::stream(seed, "finetune");
    let mut state = if cfg.freeze_encoder {
        AdamState::new(model.heads.params().iter().map(|(_, t)| t))
    } else {
        AdamState::new(
            model
                .encoder
                .params()
                .iter()
                .chain(model.heads.params().iter())
                .map(|(_, t)| t),
        )
    };

    let mut history = Vec::new();
    let mut best: Option<(f64, usize, IntentModel)> = None;
    let mut step = 0usize;
    let mut budget = 0usize;
    for epoch in 1..=cfg.epochs {
        let batches = plan_epoch(model.kind, train, cfg, n, &mut r);
        if epoch == 1 {
            budget = batches.len() * cfg.epochs;
        }
        let mut loss_sum = 0.0;
        for b in &batches {
            let adam = AdamConfig {
                lr: scheduled_lr(cfg, step, budget),
                ..Default::default()
            };
            loss_sum += train_step(&mut model, train, b, cfg, &mut state, &adam, &mut r)?;
            step += 1;
        }
        let report = build_report("dev", &model, dev)?;
        let m = EpochMetrics {
            epoch,
            train_loss: loss_sum / batches.len().max(1) as f64,
            dev_average: report.average,
            dev_weighted_average: report.weighted_average,
        };
        log::info!(
            "finetune {:?} epoch {epoch}: loss {:.4} dev avg {:?}",
            model.kind,
            m.train_loss,
            m.dev_average
        );
        let score = m.dev_average.unwrap_or(f64::NEG_INFINITY);
        history.push(m);
        match &best {
            Some((s, e, _)) if score <= *s => {
                if epoch - e >= cfg.patience {
                    break;
                }
            }
            _ => best = Some((score, epoch, model.clone())),
        }
    }
    let (best_epoch, model) = match best {
        Some((_, e, m)) => (e, m),
        None => (0, model),
    };
    Ok(Finetuned {
        model,
        history,
        best_epoch,
    })
}

/// The multiclass baseline: trained on Positives only.
pub fn finetune_baseline_multiclass(
    encoder: EncoderModel,
    train: &TrainSet,
    dev: &EvalSet,
    cfg: &FinetuneConfig,
    seed: u64,
) -> Result<Finetuned> {
    let n = dev.intents.len();
    let model = IntentModel::new(ModelKind::Multiclass, encoder, n, seed)?;
    finetune(model, train, dev, cfg, seed)
}

/// The multi-task model trained end to end under the joint loss.
pub fn finetune_multitask(
    encoder: EncoderModel,
    train: &TrainSet,
    dev: &EvalSet,
    cfg: &FinetuneConfig,
    seed: u64,
) -> Result<Finetuned> {
    let n = dev.intents.len();
    let model = IntentModel::new(ModelKind::MultiTask, encoder, n, seed)?;
    finetune(model, train, dev, cfg, seed)
}

/// An (n + 1)-way classifier with every Negative relabeled as Others.
pub fn train_others_bucket(
    encoder: EncoderModel,
    train: &TrainSet,
    dev: &EvalSet,
    cfg: &FinetuneConfig,
    seed: u64,
) -> Result<Finetuned> {
    if !train.has_negatives() {
        return Err(Error::invalid("the Others bucket needs Negatives"));
    }
    let n = dev.intents.len();
    let model = IntentModel::new(ModelKind::OthersBucket, encoder, n, seed)?;
    finetune(model, train, dev, cfg, seed)
}

/// Per-class outcome of [`train_independent_heads`].
#[derive(Clone, Debug, PartialEq)]
pub struct HeadFit {
    pub class: usize,
    /// Final training loss, or None when the head was skipped.
    pub loss: Option<f64>,
    pub examples: usize,
}

/// Fits one logistic regression per class on the classification vectors of
/// a frozen, already fine-tuned multiclass model. The encoder and the
/// multiclass head are copied unchanged.
pub fn train_independent_heads(
    baseline: &IntentModel,
    train: &TrainSet,
    cfg: &FinetuneConfig,
    seed: u64,
) -> Result<(IntentModel, Vec<HeadFit>)> {
    cfg.validate()?;
    if baseline.kind != ModelKind::Multiclass {
        return Err(Error::invalid("independent heads need a multiclass baseline"));
    }
    let n = baseline.n_classes();
    let d = baseline.encoder.config().d_model;
    let mut heads = TaskHeads::multitask(d, n, seed)?;
    heads.copy_multiclass_from(&baseline.heads)?;
    let u = baseline.classification_vectors(&train.seqs)?;
    let adam = AdamConfig {
        lr: cfg.head_lr,
        ..Default::default()
    };
    let mut fits = Vec::with_capacity(n);
    for k in 0..n {
        let idx: Vec<usize> = (0..train.len())
            .filter(|&i| train.labels[i].binary && train.labels[i].class == k)
            .collect();
        let targets: Vec<f64> = idx.iter().map(|&i| if train.labels[i].accepted { 1.0 } else { 0.0 }).collect();
        let distinct = targets.iter().any(|&t| t == 1.0) && targets.iter().any(|&t| t == 0.0);
        if !distinct {
            log::warn!("class {k}: binary pool has fewer than 2 distinct labels, head skipped");
            fits.push(HeadFit {
                class: k,
                loss: None,
                examples: idx.len(),
            });
            continue;
        }
        let x: Vec<f64> = idx.iter().flat_map(|&i| u[i].iter().copied()).collect();
        let wname = format!("head.binary.{k}.weight");
        let bname = format!("head.binary.{k}.bias");
        let mut w = heads.params().get(&wname).expect("multitask layout").clone().requiring_grad();
        let mut b = heads.params().get(&bname).expect("multitask layout").clone().requiring_grad();
        let mut state = AdamState::new([&w, &b]);
        let mut loss = f64::NAN;
        for _ in 0..cfg.head_steps {
            let mut g = Graph::new();
            let xv = g.constant(vec![idx.len(), d], x.clone())?;
            let wv = g.leaf(&w);
            let bv = g.leaf(&b);
            let z = g.matmul(xv, wv)?;
            let z = g.add_bias(z, bv)?;
            let l = g.bce_with_logits(z, &targets)?;
            let l = g.reduce_mean(l)?;
            let w2 = g.mul(wv, wv)?;
            let w2 = g.reduce_mean(w2)?;
            let penalty = g.scale(w2, d as f64 / (2.0 * cfg.head_c * idx.len() as f64))?;
            let l = g.add(l, penalty)?;
            loss = g.item(l);
            let grads = g.backward(l)?;
            w.accumulate_grad(grads.get(wv).expect("leaf gradient"))?;
            b.accumulate_grad(grads.get(bv).expect("leaf gradient"))?;
            adam_step(&mut [&mut w, &mut b], &mut state, &adam)?;
            w.zero_grad();
            b.zero_grad();
        }
        w.set_requires_grad(false);
        b.set_requires_grad(false);
        *heads.params_mut().get_mut(&wname).expect("multitask layout") = w;
        *heads.params_mut().get_mut(&bname).expect("multitask layout") = b;
        log::info!("independent head {k}: loss {loss:.4} on {} examples", idx.len());
        fits.push(HeadFit {
            class: k,
            loss: Some(loss),
            examples: idx.len(),
        });
    }
    Ok((
        IntentModel {
            kind: ModelKind::IndependentHeads,
            encoder: baseline.encoder.clone(),
            heads,
        },
        fits,
    ))
}
