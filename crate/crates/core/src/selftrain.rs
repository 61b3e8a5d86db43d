//! Iterative self-training: pseudo-label confident Unlabeled records into
//! the multiclass task, retrain, and stop once the dev gain fades.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::corpus::{argmax, EncodedSequence, TaskDataView, Vocabulary};
use crate::encoder::EncoderModel;
use crate::error::{Error, Result};
use crate::eval::EvalSet;
use crate::finetune::{finetune_multitask, FinetuneConfig, Finetuned, TrainSet};
use crate::heads::TaskLabel;
use crate::model::IntentModel;
use crate::rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelfTrainConfig {
    pub threshold: f64,
    /// Per-class cap on pseudo-labels, as a multiple of the class's
    /// labeled Positives.
    pub cap_multiplier: f64,
    pub max_iterations: usize,
    pub min_gain: f64,
    /// Score at most this many Unlabeled records (a fixed seeded sample);
    /// 0 scores the whole pool.
    pub pool_limit: usize,
}

impl Default for SelfTrainConfig {
    fn default() -> Self {
        SelfTrainConfig {
            threshold: 0.9,
            cap_multiplier: 2.5,
            max_iterations: 3,
            min_gain: 0.002,
            pool_limit: 0,
        }
    }
}

impl SelfTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::Config(format!("selftrain.threshold must lie in (0, 1), got {}", self.threshold)));
        }
        if !(self.cap_multiplier >= 0.0 && self.cap_multiplier.is_finite()) {
            return Err(Error::Config("selftrain.cap_multiplier must be non-negative".into()));
        }
        if !self.min_gain.is_finite() {
            return Err(Error::Config("selftrain.min_gain must be finite".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabel {
    pub id: String,
    pub class: usize,
    /// Max multiclass probability.
    pub confidence: f64,
    pub iteration: usize,
}

/// Encoded Unlabeled records available for pseudo-labeling.
#[derive(Clone, Debug, Default)]
pub struct UnlabeledPool {
    pub ids: Vec<String>,
    pub seqs: Vec<EncodedSequence>,
}

impl UnlabeledPool {
    pub fn from_view(view: &TaskDataView, vocab: &Vocabulary, max_len: usize, limit: usize, seed: u64) -> Result<Self> {
        let mut idx = view.unlabeled_pool().to_vec();
        if limit > 0 && limit < idx.len() {
            idx.shuffle(&mut rng::stream(seed, "selftrain.pool"));
            idx.truncate(limit);
            idx.sort_unstable();
        }
        let mut pool = UnlabeledPool::default();
        for i in idx {
            let r = view.record(i);
            pool.ids.push(r.id.clone());
            pool.seqs.push(vocab.encode(&r.text, max_len)?);
        }
        Ok(pool)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Picks pseudo-labels from already computed multiclass probabilities:
/// keep records whose max probability reaches `threshold`, then per class
/// the most confident up to `caps[class]` (ties by id).
pub fn select_from_probs(
    ids: &[String],
    probs: &[Vec<f64>],
    threshold: f64,
    caps: &[usize],
    iteration: usize,
) -> Vec<PseudoLabel> {
    let mut by_class: BTreeMap<usize, Vec<PseudoLabel>> = BTreeMap::new();
    for (id, p) in ids.iter().zip(probs) {
        let (class, confidence) = argmax(&p[..caps.len()]);
        if confidence >= threshold {
            by_class.entry(class).or_default().push(PseudoLabel {
                id: id.clone(),
                class,
                confidence,
                iteration,
            });
        }
    }
    let mut out = Vec::new();
    for (class, mut v) in by_class {
        v.sort_by(|a, b| b.confidence.total_cmp(&a.confidence).then_with(|| a.id.cmp(&b.id)));
        v.truncate(caps[class]);
        out.extend(v);
    }
    out
}

/// Scores every pool record with the multiclass head and selects
/// pseudo-labels.
pub fn select_pseudo_labels(
    model: &IntentModel,
    pool: &UnlabeledPool,
    threshold: f64,
    caps: &[usize],
    iteration: usize,
) -> Result<Vec<PseudoLabel>> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::invalid(format!("threshold must lie in (0, 1), got {threshold}")));
    }
    if caps.len() != model.n_classes() {
        return Err(Error::invalid(format!("{} caps for {} classes", caps.len(), model.n_classes())));
    }
    if pool.is_empty() {
        return Ok(Vec::new());
    }
    let u = model.classification_vectors(&pool.seqs)?;
    let probs: Vec<Vec<f64>> = u.iter().map(|u| model.heads.class_probs(u)).collect();
    Ok(select_from_probs(&pool.ids, &probs, threshold, caps, iteration))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub added: usize,
    pub total_pseudo: usize,
    pub dev_average: Option<f64>,
    pub dev_weighted_average: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelfTrainState {
    pub iterations: Vec<IterationRecord>,
    /// Hash of the binary-task examples, checked at every iteration.
    pub binary_pool_hash: String,
    pub augmentation: Vec<PseudoLabel>,
    /// Iteration whose model was returned.
    pub best_iteration: usize,
}

#[derive(Clone, Debug)]
pub struct SelfTrained {
    pub model: IntentModel,
    pub state: SelfTrainState,
}

fn best_dev(f: &Finetuned) -> (Option<f64>, Option<f64>) {
    match f.best_epoch {
        0 => (None, None),
        e => (f.history[e - 1].dev_average, f.history[e - 1].dev_weighted_average),
    }
}

fn write_jsonl(path: &Path, labels: &[PseudoLabel]) -> Result<()> {
    let mut f = std::io::BufWriter::new(fs::File::create(path)?);
    for l in labels {
        serde_json::to_writer(&mut f, l)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

/// Runs the self-training loop from an adapted encoder. Iteration 0 is
/// plain multi-task fine-tuning on `curated`; every later iteration
/// retrains fresh heads on the warm-started encoder with the accumulated
/// pseudo-labels added to the multiclass task only. Returns the model of
/// the best dev iteration.
#[allow(clippy::too_many_arguments)]
pub fn self_train(
    encoder: &EncoderModel,
    curated: &TrainSet,
    pool: &UnlabeledPool,
    dev: &EvalSet,
    ft: &FinetuneConfig,
    cfg: &SelfTrainConfig,
    seed: u64,
    dump_dir: Option<&Path>,
) -> Result<SelfTrained> {
    cfg.validate()?;
    let first = finetune_multitask(encoder.clone(), curated, dev, ft, seed)?;
    self_train_from(first, encoder, curated, pool, dev, ft, cfg, seed, dump_dir)
}

/// [`self_train`] with iteration 0 already trained (with `seed`).
#[allow(clippy::too_many_arguments)]
pub fn self_train_from(
    first: Finetuned,
    encoder: &EncoderModel,
    curated: &TrainSet,
    pool: &UnlabeledPool,
    dev: &EvalSet,
    ft: &FinetuneConfig,
    cfg: &SelfTrainConfig,
    seed: u64,
    dump_dir: Option<&Path>,
) -> Result<SelfTrained> {
    cfg.validate()?;
    let n = dev.intents.len();
    let hash = curated.binary_pool_hash();
    let curated_ids: HashSet<&str> = curated.ids.iter().map(String::as_str).collect();
    if let Some(id) = pool.ids.iter().find(|id| curated_ids.contains(id.as_str())) {
        return Err(Error::invalid(format!("unlabeled pool contains curated record {id}")));
    }
    let mut positives = vec![0usize; n];
    for l in curated.labels.iter().filter(|l| l.accepted && l.binary) {
        positives[l.class] += 1;
    }
    let caps_total: Vec<usize> = positives
        .iter()
        .map(|&p| (cfg.cap_multiplier * p as f64).floor() as usize)
        .collect();
    let seq_of: BTreeMap<&str, &EncodedSequence> = pool.ids.iter().map(String::as_str).zip(&pool.seqs).collect();
    if let Some(dir) = dump_dir {
        fs::create_dir_all(dir)?;
    }

    let (avg, wavg) = best_dev(&first);
    let mut state = SelfTrainState {
        iterations: vec![IterationRecord {
            iteration: 0,
            added: 0,
            total_pseudo: 0,
            dev_average: avg,
            dev_weighted_average: wavg,
        }],
        binary_pool_hash: hash.clone(),
        augmentation: Vec::new(),
        best_iteration: 0,
    };
    let mut best = (avg.unwrap_or(f64::NEG_INFINITY), first.model.clone());
    let mut previous = avg.unwrap_or(f64::NEG_INFINITY);
    let mut current = first.model;

    for it in 1..=cfg.max_iterations {
        let taken: HashSet<&str> = state.augmentation.iter().map(|p| p.id.as_str()).collect();
        let remaining = UnlabeledPool {
            ids: pool.ids.iter().filter(|id| !taken.contains(id.as_str())).cloned().collect(),
            seqs: pool
                .ids
                .iter()
                .zip(&pool.seqs)
                .filter(|(id, _)| !taken.contains(id.as_str()))
                .map(|(_, s)| s.clone())
                .collect(),
        };
        let mut used = vec![0usize; n];
        for p in &state.augmentation {
            used[p.class] += 1;
        }
        let caps: Vec<usize> = caps_total.iter().zip(&used).map(|(c, u)| c.saturating_sub(*u)).collect();
        let selected = select_pseudo_labels(&current, &remaining, cfg.threshold, &caps, it)?;
        if let Some(dir) = dump_dir {
            write_jsonl(&dir.join(format!("pseudo_labels_iter{it}.jsonl")), &selected)?;
        }
        if selected.is_empty() {
            log::info!("self-training iteration {it}: no confident records, stopping");
            break;
        }
        state.augmentation.extend(selected.iter().cloned());

        let mut train = curated.clone();
        for p in &state.augmentation {
            train.push(p.id.clone(), seq_of[p.id.as_str()].clone(), TaskLabel::pseudo(p.class));
        }
        if train.binary_pool_hash() != hash {
            return Err(Error::invalid("pseudo-labels leaked into a binary pool"));
        }
        let out = finetune_multitask(encoder.clone(), &train, dev, ft, seed.wrapping_add(it as u64))?;
        let (avg, wavg) = best_dev(&out);
        state.iterations.push(IterationRecord {
            iteration: it,
            added: selected.len(),
            total_pseudo: state.augmentation.len(),
            dev_average: avg,
            dev_weighted_average: wavg,
        });
        let score = avg.unwrap_or(f64::NEG_INFINITY);
        log::info!(
            "self-training iteration {it}: +{} pseudo-labels ({} total), dev avg {score:.4}",
            selected.len(),
            state.augmentation.len()
        );
        if score > best.0 {
            best = (score, out.model.clone());
            state.best_iteration = it;
        }
        let gain = score - previous;
        previous = score;
        current = out.model;
        if gain < cfg.min_gain {
            break;
        }
    }
    Ok(SelfTrained { model: best.1, state })
}
