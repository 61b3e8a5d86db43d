//! Experiment configuration, the staged pretraining cache, and the
//! ablation ladder.

use std::fmt;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{hex, CurationConfig, Dataset, EncodedSequence, GeneratorConfig, Split, TaskDataView, Vocabulary};
use crate::encoder::{EncoderConfig, EncoderModel};
use crate::error::{Error, Result};
use crate::eval::{build_report, knn_probe, default_k_range, EvalSet, MetricsReport};
use crate::finetune::{
    finetune_baseline_multiclass, finetune_multitask, train_independent_heads, train_others_bucket, FinetuneConfig,
    Finetuned, TrainSet,
};
use crate::model::{load_encoder, save_encoder, IntentModel};
use crate::pretrain::{fixed_mask, heldout_loss, run_pretraining, write_loss_history, MlmHead, PretrainConfig, PretrainPlan, Stage};
use crate::rng;
use crate::selftrain::{self_train_from, SelfTrainConfig, SelfTrainState, UnlabeledPool};

pub const SEED_ENV: &str = "PUNINTENT_SEED";
pub const CONFIG_FILE: &str = "config.toml";
const VOCAB_FILE: &str = "vocab.txt";
const META_FILE: &str = "dataset_meta.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub data_dir: PathBuf,
    pub checkpoint_dir: PathBuf,
    pub report_dir: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        PathsConfig {
            data_dir: "runs/data".into(),
            checkpoint_dir: "runs/checkpoints".into(),
            report_dir: "runs/reports".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VocabConfig {
    pub max_size: usize,
    pub min_frequency: usize,
}

impl Default for VocabConfig {
    fn default() -> Self {
        VocabConfig {
            max_size: 5000,
            min_frequency: 2,
        }
    }
}

/// Settings of the kNN probe and the embedding export.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    /// Test records sampled per intent (those with a known true intent).
    pub per_class: usize,
    /// PCA target dimension for exported embeddings, capped at d_model.
    pub pca_dim: usize,
    /// Dev-split domain sequences used for the held-out MLM loss.
    pub heldout_sequences: usize,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            per_class: 150,
            pca_dim: 50,
            heldout_sequences: 1000,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RowName {
    Baseline,
    Mt,
    MtDapt,
    MtDtapt,
    SsMtDtapt,
    OthersBucket,
    IndependentHeads,
}

impl RowName {
    pub const ALL: [RowName; 7] = [
        RowName::Baseline,
        RowName::Mt,
        RowName::MtDapt,
        RowName::MtDtapt,
        RowName::SsMtDtapt,
        RowName::OthersBucket,
        RowName::IndependentHeads,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            RowName::Baseline => "baseline",
            RowName::Mt => "mt",
            RowName::MtDapt => "mt_dapt",
            RowName::MtDtapt => "mt_dtapt",
            RowName::SsMtDtapt => "ss_mt_dtapt",
            RowName::OthersBucket => "others_bucket",
            RowName::IndependentHeads => "independent_heads",
        }
    }

    /// The pretraining stage whose encoder the row starts from.
    pub fn stage(self) -> Stage {
        match self {
            RowName::MtDapt => Stage::Dapt,
            RowName::MtDtapt | RowName::SsMtDtapt => Stage::Tapt,
            _ => Stage::Generic,
        }
    }
}

impl fmt::Display for RowName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    pub rows: Vec<RowName>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig {
            rows: RowName::ALL.to_vec(),
        }
    }
}

/// Everything a run needs. Serialized as TOML; every key lives under a
/// dotted namespace (`finetune.lr`, `selftrain.threshold`, ...).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    /// Encoded sequence length, `[CLS]` included.
    pub max_len: usize,
    pub paths: PathsConfig,
    pub generator: GeneratorConfig,
    pub curation: CurationConfig,
    pub vocab: VocabConfig,
    /// `vocab_size` and `max_len` are filled in from the vocabulary and
    /// the top-level `max_len`.
    pub encoder: EncoderConfig,
    pub pretrain: PretrainConfig,
    pub finetune: FinetuneConfig,
    pub selftrain: SelfTrainConfig,
    pub probe: ProbeConfig,
    pub ablation: AblationConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 1,
            max_len: 16,
            paths: PathsConfig::default(),
            generator: GeneratorConfig::default(),
            curation: CurationConfig::default(),
            vocab: VocabConfig::default(),
            encoder: EncoderConfig {
                d_model: 32,
                n_layers: 2,
                n_heads: 4,
                d_ff: 64,
                max_len: 16,
                dropout: 0.1,
                ..Default::default()
            },
            pretrain: PretrainConfig {
                generic_epochs: 3,
                dapt_epochs: 20,
                tapt_epochs: 4,
                max_sequences_per_epoch: 10_000,
                ..Default::default()
            },
            finetune: FinetuneConfig::default(),
            selftrain: SelfTrainConfig {
                pool_limit: 10_000,
                ..Default::default()
            },
            probe: ProbeConfig::default(),
            ablation: AblationConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads `path` (defaults when None) and applies the seed override
    /// from the environment.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let mut cfg = match path {
            Some(p) => {
                if !p.exists() {
                    return Err(Error::MissingPath(p.to_path_buf()));
                }
                Self::from_toml_str(&fs::read_to_string(p)?)?
            }
            None => ExperimentConfig::default(),
        };
        if let Ok(v) = std::env::var(SEED_ENV) {
            cfg.seed = v
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("{SEED_ENV}={v:?} is not a u64")))?;
        }
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.generator.validate()?;
        self.curation.validate()?;
        self.pretrain.validate()?;
        self.finetune.validate()?;
        self.selftrain.validate()?;
        if self.max_len < 2 {
            return Err(Error::Config("max_len must be at least 2".into()));
        }
        if self.ablation.rows.is_empty() {
            return Err(Error::Config("ablation.rows is empty".into()));
        }
        Ok(())
    }

    /// Directory holding the dataset of this seed.
    pub fn data_dir(&self) -> PathBuf {
        self.paths.data_dir.join(format!("seed-{}", self.seed))
    }

    pub fn run_dir(&self, name: &str) -> PathBuf {
        self.paths.report_dir.join(format!("{name}-seed{}", self.seed))
    }

    pub fn write_resolved(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join(CONFIG_FILE), self.to_toml_string()?)?;
        Ok(())
    }
}

fn sha_json(value: &impl Serialize) -> Result<String> {
    Ok(hex(&Sha256::digest(serde_json::to_vec(value)?)))
}

/// A loaded dataset with its vocabulary and per-split views.
pub struct Workspace {
    pub cfg: ExperimentConfig,
    pub dataset: Dataset,
    pub vocab: Vocabulary,
    pub train: TaskDataView,
    pub dev: TaskDataView,
    pub test: TaskDataView,
}

#[derive(Serialize)]
struct DatasetMeta<'a> {
    seed: u64,
    generator: &'a GeneratorConfig,
    curation: &'a CurationConfig,
    vocab: &'a VocabConfig,
}

impl Workspace {
    /// Synthesizes the dataset and vocabulary and writes both to the data
    /// directory.
    pub fn generate(cfg: &ExperimentConfig) -> Result<PathBuf> {
        cfg.validate()?;
        let dir = cfg.data_dir();
        let dataset = Dataset::synthesize(&cfg.generator, &cfg.curation, cfg.seed)?;
        let vocab = dataset.build_vocabulary(cfg.vocab.max_size, cfg.vocab.min_frequency)?;
        dataset.save(&dir)?;
        vocab.save(&dir.join(VOCAB_FILE))?;
        fs::write(dir.join(META_FILE), serde_json::to_vec_pretty(&Self::meta(cfg))?)?;
        Ok(dir)
    }

    fn meta(cfg: &ExperimentConfig) -> DatasetMeta<'_> {
        DatasetMeta {
            seed: cfg.seed,
            generator: &cfg.generator,
            curation: &cfg.curation,
            vocab: &cfg.vocab,
        }
    }

    /// Loads the dataset of this config, generating it first when the
    /// data directory has none.
    pub fn open(cfg: &ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        let dir = cfg.data_dir();
        let meta_path = dir.join(META_FILE);
        let expected = serde_json::to_value(Self::meta(cfg))?;
        if meta_path.exists() {
            let found: serde_json::Value = serde_json::from_slice(&fs::read(&meta_path)?)?;
            if found != expected {
                return Err(Error::Config(format!(
                    "{} holds a dataset built from a different config; rerun gen-data or change paths.data_dir",
                    dir.display()
                )));
            }
        } else {
            log::info!("no dataset in {}, generating", dir.display());
            Self::generate(cfg)?;
        }
        let dataset = Dataset::load(&dir)?;
        let vocab = Vocabulary::load(&dir.join(VOCAB_FILE))?;
        let train = dataset.view(Split::Train)?;
        let dev = dataset.view(Split::Dev)?;
        let test = dataset.view(Split::Test)?;
        Ok(Workspace {
            cfg: cfg.clone(),
            dataset,
            vocab,
            train,
            dev,
            test,
        })
    }

    pub fn encoder_config(&self) -> EncoderConfig {
        EncoderConfig {
            vocab_size: self.vocab.len(),
            max_len: self.cfg.max_len,
            ..self.cfg.encoder.clone()
        }
    }

    pub fn encode_all(&self, texts: &[&str]) -> Result<Vec<EncodedSequence>> {
        texts.iter().map(|t| self.vocab.encode(t, self.cfg.max_len)).collect()
    }

    pub fn view(&self, split: Split) -> &TaskDataView {
        match split {
            Split::Train => &self.train,
            Split::Dev => &self.dev,
            Split::Test => &self.test,
        }
    }

    pub fn eval_set(&self, split: Split) -> Result<EvalSet> {
        EvalSet::from_view(self.view(split), &self.vocab, self.cfg.max_len)
    }

    pub fn train_set(&self) -> Result<TrainSet> {
        TrainSet::curated(&self.train, &self.vocab, self.cfg.max_len)
    }

    /// SHA-256 of each split's records, used to show that every ladder row
    /// consumed the same data.
    pub fn split_hashes(&self) -> Result<Vec<(Split, String)>> {
        [Split::Train, Split::Dev, Split::Test]
            .into_iter()
            .map(|s| Ok((s, sha_json(&self.view(s).records())?)))
            .collect()
    }

    fn stage_key(&self, stage: Stage) -> Result<String> {
        let chain: &[Stage] = match stage {
            Stage::Generic => &[Stage::Generic],
            Stage::Dapt => &[Stage::Generic, Stage::Dapt],
            Stage::Tapt => &[Stage::Generic, Stage::Dapt, Stage::Tapt],
        };
        // epochs of later stages must not invalidate earlier ones
        let mut shared = self.cfg.pretrain.clone();
        shared.generic_epochs = 0;
        shared.dapt_epochs = 0;
        shared.tapt_epochs = 0;
        let epochs: Vec<usize> = chain.iter().map(|&s| self.cfg.pretrain.epochs(s)).collect();
        let key = sha_json(&(
            chain,
            epochs,
            self.encoder_config(),
            &shared,
            Self::meta(&self.cfg),
            self.vocab.hash(),
        ))?;
        Ok(key[..16].to_string())
    }

    pub fn stage_dir(&self, stage: Stage) -> Result<PathBuf> {
        Ok(self
            .cfg
            .paths
            .checkpoint_dir
            .join(format!("seed-{}", self.cfg.seed))
            .join(format!("encoder-{stage}-{}", self.stage_key(stage)?)))
    }

    fn stage_corpus(&self, stage: Stage) -> Result<(Vec<EncodedSequence>, Vec<EncodedSequence>)> {
        let heldout_n = self.cfg.pretrain.heldout_sequences;
        let (train, heldout): (Vec<&str>, Vec<&str>) = match stage {
            Stage::Generic => {
                let g: Vec<&str> = self.dataset.generic.iter().map(String::as_str).collect();
                // the generic corpus has no split; hold out its tail
                let cut = g.len().saturating_sub(heldout_n.min(g.len() / 10));
                (g[..cut].to_vec(), g[cut..].to_vec())
            }
            Stage::Dapt => (self.train.dapt_corpus(), self.dev.dapt_corpus()),
            Stage::Tapt => (self.train.tapt_corpus(), self.dev.tapt_corpus()),
        };
        let heldout = &heldout[..heldout.len().min(heldout_n)];
        Ok((self.encode_all(&train)?, self.encode_all(heldout)?))
    }

    /// The encoder after `stage` (each stage continues from the previous
    /// one), loaded from the checkpoint cache or trained and cached.
    pub fn pretrained_encoder(&self, stage: Stage) -> Result<(EncoderModel, MlmHead)> {
        let dir = self.stage_dir(stage)?;
        let hash = self.vocab.hash();
        if dir.join("manifest.json").exists() {
            let (encoder, extra) = load_encoder(&dir, &hash)?;
            let head = MlmHead::from_params(self.vocab.len(), &extra)?;
            return Ok((encoder, head));
        }
        let (mut encoder, mut head) = match stage {
            Stage::Generic => (
                EncoderModel::init(self.encoder_config(), self.cfg.seed)?,
                MlmHead::new(self.vocab.len()),
            ),
            Stage::Dapt => self.pretrained_encoder(Stage::Generic)?,
            Stage::Tapt => self.pretrained_encoder(Stage::Dapt)?,
        };
        let (corpus, heldout) = self.stage_corpus(stage)?;
        let plan = PretrainPlan {
            stage,
            epochs: self.cfg.pretrain.epochs(stage),
            config: self.cfg.pretrain.clone(),
            seed: self.cfg.seed,
        };
        log::info!("pretraining {stage}: {} epochs over {} sequences", plan.epochs, corpus.len());
        let history = run_pretraining(&mut encoder, &mut head, &plan, &corpus, &heldout)?;
        save_encoder(&dir, &encoder, head.params(), &hash)?;
        write_loss_history(&dir.join("loss_history.csv"), &history)?;
        Ok((encoder, head))
    }

    /// A class-balanced sample of test records with known true intent:
    /// (ids, true intent names, class indices, sequences).
    pub fn probe_sample(&self) -> Result<ProbeSample> {
        let mut r = rng::stream(self.cfg.seed, "probe.sample");
        let intents = self.dataset.intents.clone();
        let mut sample = ProbeSample::default();
        for (k, name) in intents.iter().enumerate() {
            let mut idx: Vec<usize> = (0..self.test.records().len())
                .filter(|&i| self.test.record(i).true_intent.as_deref() == Some(name.as_str()))
                .collect();
            rand::seq::SliceRandom::shuffle(idx.as_mut_slice(), &mut r);
            idx.truncate(self.cfg.probe.per_class);
            idx.sort_unstable();
            for i in idx {
                let rec = self.test.record(i);
                sample.ids.push(rec.id.clone());
                sample.intents.push(name.clone());
                sample.classes.push(k);
                sample.seqs.push(self.vocab.encode(&rec.text, self.cfg.max_len)?);
            }
        }
        Ok(sample)
    }

    /// Held-out masked cross-entropy on dev-split domain text, with a
    /// fixed mask shared by every encoder scored.
    pub fn domain_heldout_loss(&self, encoder: &EncoderModel, head: &MlmHead) -> Result<f64> {
        let texts = self.dev.dapt_corpus();
        let n = texts.len().min(self.cfg.probe.heldout_sequences);
        let seqs = self.encode_all(&texts[..n])?;
        let batch = fixed_mask(&seqs, self.cfg.pretrain.mask_rate, self.vocab.len(), self.cfg.seed)?;
        heldout_loss(encoder, head, &batch, 64)
    }
}

#[derive(Clone, Debug, Default)]
pub struct ProbeSample {
    pub ids: Vec<String>,
    pub intents: Vec<String>,
    pub classes: Vec<usize>,
    pub seqs: Vec<EncodedSequence>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageMetrics {
    pub stage: Stage,
    /// Average kNN probe accuracy of the bare pretrained encoder.
    pub knn_accuracy: f64,
    /// Masked cross-entropy on held-out domain text.
    pub heldout_mlm_loss: f64,
}

/// kNN probe and held-out MLM loss of each pretraining stage.
pub fn adaptation_metrics(ws: &Workspace) -> Result<Vec<StageMetrics>> {
    let sample = ws.probe_sample()?;
    let mut out = Vec::new();
    for stage in [Stage::Generic, Stage::Dapt, Stage::Tapt] {
        let (encoder, head) = ws.pretrained_encoder(stage)?;
        let u = encoder.embed(&sample.seqs, 64)?;
        let knn = knn_probe(&u, &sample.classes, &default_k_range())?;
        let loss = ws.domain_heldout_loss(&encoder, &head)?;
        log::info!("{stage}: kNN {:.4}, held-out MLM {loss:.4}", knn.average);
        out.push(StageMetrics {
            stage,
            knn_accuracy: knn.average,
            heldout_mlm_loss: loss,
        });
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: RowName,
    pub report: Option<MetricsReport>,
    pub error: Option<String>,
}

impl AblationRow {
    pub fn average(&self) -> Option<f64> {
        self.report.as_ref().and_then(|r| r.average)
    }

    pub fn weighted_average(&self) -> Option<f64> {
        self.report.as_ref().and_then(|r| r.weighted_average)
    }
}

#[derive(Clone, Debug)]
pub struct AblationOutcome {
    pub rows: Vec<AblationRow>,
    pub adaptation: Vec<StageMetrics>,
    pub selftrain: Option<SelfTrainState>,
    pub split_hashes: Vec<(Split, String)>,
    pub run_dir: PathBuf,
}

impl AblationOutcome {
    pub fn row(&self, name: RowName) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.name == name)
    }
}

fn fmt_opt(v: Option<f64>, scale: f64, prec: usize) -> String {
    v.map_or_else(String::new, |x| format!("{:.*}", prec, x * scale))
}

fn delta(a: Option<f64>, base: Option<f64>) -> Option<f64> {
    Some(a? - base?)
}

/// Combined ladder report: one row per ablation row with deltas against the
/// baseline row (absent when the baseline is not part of the run).
pub fn ablation_csv(rows: &[AblationRow]) -> Result<String> {
    let base = rows.iter().find(|r| r.name == RowName::Baseline);
    let (ba, bw) = (base.and_then(AblationRow::average), base.and_then(AblationRow::weighted_average));
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["row", "avg_auc_roc", "wavg_auc_roc", "delta_avg", "delta_wavg", "oracle_accuracy", "status"])?;
    for r in rows {
        w.write_record([
            r.name.to_string(),
            fmt_opt(r.average(), 1.0, 6),
            fmt_opt(r.weighted_average(), 1.0, 6),
            fmt_opt(delta(r.average(), ba), 1.0, 6),
            fmt_opt(delta(r.weighted_average(), bw), 1.0, 6),
            fmt_opt(r.report.as_ref().and_then(|x| x.oracle_accuracy), 1.0, 6),
            r.error.clone().map_or("ok".to_string(), |e| format!("failed: {e}")),
        ])?;
    }
    String::from_utf8(w.into_inner().map_err(|e| Error::invalid(e.to_string()))?).map_err(|e| Error::invalid(e.to_string()))
}

pub fn ablation_markdown(outcome: &AblationOutcome) -> String {
    let rows = &outcome.rows;
    let base = rows.iter().find(|r| r.name == RowName::Baseline);
    let (ba, bw) = (base.and_then(AblationRow::average), base.and_then(AblationRow::weighted_average));
    let mut s = String::from("# Ablation\n\nAUC ROC on the test split, in points; deltas are against the baseline row.\n\n");
    s.push_str("| row | avg | wavg | delta avg | delta wavg |\n|---|---:|---:|---:|---:|\n");
    for r in rows {
        match &r.error {
            None => {
                let _ = writeln!(
                    s,
                    "| {} | {} | {} | {} | {} |",
                    r.name,
                    fmt_opt(r.average(), 100.0, 2),
                    fmt_opt(r.weighted_average(), 100.0, 2),
                    fmt_opt(delta(r.average(), ba), 100.0, 2),
                    fmt_opt(delta(r.weighted_average(), bw), 100.0, 2)
                );
            }
            Some(e) => {
                let _ = writeln!(s, "| {} | failed: {e} | | | |", r.name);
            }
        }
    }
    if !outcome.adaptation.is_empty() {
        s.push_str("\n## Pretraining stages\n\n| stage | kNN probe accuracy | held-out MLM loss |\n|---|---:|---:|\n");
        for m in &outcome.adaptation {
            let _ = writeln!(s, "| {} | {:.4} | {:.4} |", m.stage, m.knn_accuracy, m.heldout_mlm_loss);
        }
    }
    if let Some(st) = &outcome.selftrain {
        s.push_str("\n## Self-training\n\n| iteration | added | total | dev avg |\n|---:|---:|---:|---:|\n");
        for it in &st.iterations {
            let _ = writeln!(
                s,
                "| {} | {} | {} | {} |",
                it.iteration,
                it.added,
                it.total_pseudo,
                fmt_opt(it.dev_average, 100.0, 2)
            );
        }
    }
    s.push_str("\n## Split hashes\n\n");
    for (split, h) in &outcome.split_hashes {
        let _ = writeln!(s, "- {split:?}: `{h}`");
    }
    s
}

struct Ladder<'a> {
    ws: &'a Workspace,
    train: TrainSet,
    dev: EvalSet,
    test: EvalSet,
    run_dir: PathBuf,
    baseline: Option<IntentModel>,
    mt_dtapt: Option<Finetuned>,
    selftrain: Option<SelfTrainState>,
}

impl Ladder<'_> {
    fn encoder(&self, stage: Stage) -> Result<EncoderModel> {
        Ok(self.ws.pretrained_encoder(stage)?.0)
    }

    fn baseline(&mut self) -> Result<IntentModel> {
        if let Some(m) = &self.baseline {
            return Ok(m.clone());
        }
        let cfg = &self.ws.cfg;
        let m = finetune_baseline_multiclass(self.encoder(Stage::Generic)?, &self.train, &self.dev, &cfg.finetune, cfg.seed)?.model;
        self.baseline = Some(m.clone());
        Ok(m)
    }

    fn mt_dtapt(&mut self) -> Result<Finetuned> {
        if let Some(m) = &self.mt_dtapt {
            return Ok(m.clone());
        }
        let cfg = &self.ws.cfg;
        let m = finetune_multitask(self.encoder(Stage::Tapt)?, &self.train, &self.dev, &cfg.finetune, cfg.seed)?;
        self.mt_dtapt = Some(m.clone());
        Ok(m)
    }

    fn model(&mut self, row: RowName) -> Result<IntentModel> {
        let cfg = self.ws.cfg.clone();
        let (ft, seed) = (&cfg.finetune, cfg.seed);
        Ok(match row {
            RowName::Baseline => self.baseline()?,
            RowName::Mt | RowName::MtDapt => {
                finetune_multitask(self.encoder(row.stage())?, &self.train, &self.dev, ft, seed)?.model
            }
            RowName::MtDtapt => self.mt_dtapt()?.model,
            RowName::SsMtDtapt => {
                let first = self.mt_dtapt()?;
                let encoder = self.encoder(Stage::Tapt)?;
                let pool = UnlabeledPool::from_view(&self.ws.train, &self.ws.vocab, cfg.max_len, cfg.selftrain.pool_limit, seed)?;
                let dump = self.run_dir.join("selftrain");
                let out = self_train_from(first, &encoder, &self.train, &pool, &self.dev, ft, &cfg.selftrain, seed, Some(&dump))?;
                self.selftrain = Some(out.state);
                out.model
            }
            RowName::OthersBucket => {
                train_others_bucket(self.encoder(Stage::Generic)?, &self.train, &self.dev, ft, seed)?.model
            }
            RowName::IndependentHeads => {
                let base = self.baseline()?;
                train_independent_heads(&base, &self.train, ft, seed)?.0
            }
        })
    }
}

/// Runs the configured ladder rows on identical data and seeds, writing
/// the combined and per-row reports into the run directory. A failing row
/// is recorded and the remaining rows still run.
pub fn run_ablation(cfg: &ExperimentConfig) -> Result<AblationOutcome> {
    let ws = Workspace::open(cfg)?;
    let run_dir = cfg.run_dir("ablation");
    fs::create_dir_all(&run_dir)?;
    cfg.write_resolved(&run_dir)?;
    let split_hashes = ws.split_hashes()?;
    let adaptation = adaptation_metrics(&ws)?;
    let mut ladder = Ladder {
        ws: &ws,
        train: ws.train_set()?,
        dev: ws.eval_set(Split::Dev)?,
        test: ws.eval_set(Split::Test)?,
        run_dir: run_dir.clone(),
        baseline: None,
        mt_dtapt: None,
        selftrain: None,
    };
    let mut rows = Vec::new();
    for &name in &cfg.ablation.rows {
        log::info!("ablation row {name}");
        let result = ladder
            .model(name)
            .and_then(|m| build_report(name.as_str(), &m, &ladder.test));
        let row = match result {
            Ok(report) => {
                report.write(&run_dir.join("rows").join(name.as_str()))?;
                AblationRow {
                    name,
                    report: Some(report),
                    error: None,
                }
            }
            Err(e) => {
                log::error!("ablation row {name} failed: {e}");
                AblationRow {
                    name,
                    report: None,
                    error: Some(e.to_string()),
                }
            }
        };
        rows.push(row);
        // persist progress after every row
        fs::write(run_dir.join("report.csv"), ablation_csv(&rows)?)?;
    }
    let outcome = AblationOutcome {
        rows,
        adaptation,
        selftrain: ladder.selftrain.take(),
        split_hashes,
        run_dir: run_dir.clone(),
    };
    fs::write(run_dir.join("report.md"), ablation_markdown(&outcome))?;
    fs::write(run_dir.join("adaptation.json"), serde_json::to_vec_pretty(&outcome.adaptation)?)?;
    if let Some(st) = &outcome.selftrain {
        fs::write(run_dir.join("selftrain.json"), serde_json::to_vec_pretty(st)?)?;
    }
    Ok(outcome)
}
