use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use punintent_core::checkpoint;
use punintent_core::corpus::Split;
use punintent_core::encoder::EncoderModel;
use punintent_core::eval::{build_report, pca_reduce, write_embeddings_csv, EvalSet};
use punintent_core::experiment::{run_ablation, ExperimentConfig, Workspace, SEED_ENV};
use punintent_core::finetune::{
    finetune_baseline_multiclass, finetune_multitask, train_others_bucket, FinetuneConfig, Finetuned, TrainSet,
};
use punintent_core::model::{load_encoder, IntentModel};
use punintent_core::pretrain::Stage;
use punintent_core::selftrain::{self_train, UnlabeledPool};

#[derive(Parser)]
#[command(name = "punintent", version, about = "Semi-supervised multi-task intent classification")]
struct Cli {
    /// TOML experiment config; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed and the PUNINTENT_SEED variable.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum StageArg {
    Generic,
    Dapt,
    Tapt,
}

impl From<StageArg> for Stage {
    fn from(s: StageArg) -> Self {
        match s {
            StageArg::Generic => Stage::Generic,
            StageArg::Dapt => Stage::Dapt,
            StageArg::Tapt => Stage::Tapt,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum KindArg {
    Multitask,
    Multiclass,
    OthersBucket,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Dev,
    Test,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize the corpus, curation records, and vocabulary.
    GenData,
    /// Run (or load from cache) the pretraining stages up to --stage.
    Pretrain {
        #[arg(long, value_enum, default_value = "tapt")]
        stage: StageArg,
    },
    /// Fine-tune one model and save it as a checkpoint.
    Finetune {
        #[arg(long, value_enum, default_value = "multitask")]
        kind: KindArg,
        #[arg(long, value_enum, default_value = "tapt")]
        stage: StageArg,
        /// Checkpoint directory; defaults under the checkpoint dir.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Self-train a multi-task model from the fully adapted encoder.
    Selftrain {
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score a saved model and write its report.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
    },
    /// Run the ablation ladder.
    Ablate,
    /// Write PCA-reduced classification vectors of the probe sample.
    ExportEmbeddings {
        /// Model or encoder checkpoint; defaults to the pretrained encoder
        /// of --stage.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "tapt")]
        stage: StageArg,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn resolve_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(cli.config.as_deref())
        .with_context(|| format!("loading config (seed override via {SEED_ENV})"))?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn model_dir(cfg: &ExperimentConfig, name: &str) -> PathBuf {
    cfg.paths.checkpoint_dir.join(format!("seed-{}", cfg.seed)).join(name)
}

fn load_any_encoder(dir: &Path, vocab_hash: &str) -> Result<EncoderModel> {
    let manifest = checkpoint::read_manifest(dir)?;
    if manifest.config.get("kind").and_then(|k| k.as_str()) == Some("encoder") {
        Ok(load_encoder(dir, vocab_hash)?.0)
    } else {
        Ok(IntentModel::load(dir, vocab_hash)?.encoder)
    }
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let cfg = resolve_config(&cli)?;
    match &cli.command {
        Command::GenData => {
            let dir = Workspace::generate(&cfg)?;
            cfg.write_resolved(&dir)?;
            println!("dataset written to {}", dir.display());
        }
        Command::Pretrain { stage } => {
            let ws = Workspace::open(&cfg)?;
            let stage = Stage::from(*stage);
            ws.pretrained_encoder(stage)?;
            let dir = ws.stage_dir(stage)?;
            cfg.write_resolved(&dir)?;
            println!("{stage} encoder at {}", dir.display());
        }
        Command::Finetune { kind, stage, out } => {
            let ws = Workspace::open(&cfg)?;
            let stage = Stage::from(*stage);
            let (encoder, _) = ws.pretrained_encoder(stage)?;
            let (train, dev) = (ws.train_set()?, ws.eval_set(Split::Dev)?);
            type Trainer = fn(EncoderModel, &TrainSet, &EvalSet, &FinetuneConfig, u64) -> punintent_core::Result<Finetuned>;
            let (name, f): (&str, Trainer) = match kind {
                KindArg::Multitask => ("multitask", finetune_multitask),
                KindArg::Multiclass => ("multiclass", finetune_baseline_multiclass),
                KindArg::OthersBucket => ("others_bucket", train_others_bucket),
            };
            let done = f(encoder, &train, &dev, &cfg.finetune, cfg.seed)?;
            let dir = out.clone().unwrap_or_else(|| model_dir(&cfg, &format!("model-{name}-{stage}")));
            done.model.save(&dir, &ws.vocab.hash())?;
            cfg.write_resolved(&dir)?;
            fs::write(dir.join("history.json"), serde_json::to_vec_pretty(&done.history)?)?;
            println!("best dev epoch {} saved to {}", done.best_epoch, dir.display());
        }
        Command::Selftrain { out } => {
            let ws = Workspace::open(&cfg)?;
            let (encoder, _) = ws.pretrained_encoder(Stage::Tapt)?;
            let (train, dev) = (ws.train_set()?, ws.eval_set(Split::Dev)?);
            let pool = UnlabeledPool::from_view(&ws.train, &ws.vocab, cfg.max_len, cfg.selftrain.pool_limit, cfg.seed)?;
            let dir = out.clone().unwrap_or_else(|| model_dir(&cfg, "model-selftrain"));
            let done = self_train(&encoder, &train, &pool, &dev, &cfg.finetune, &cfg.selftrain, cfg.seed, Some(&dir))?;
            done.model.save(&dir, &ws.vocab.hash())?;
            cfg.write_resolved(&dir)?;
            fs::write(dir.join("selftrain.json"), serde_json::to_vec_pretty(&done.state)?)?;
            println!(
                "best iteration {} of {}, model saved to {}",
                done.state.best_iteration,
                done.state.iterations.len() - 1,
                dir.display()
            );
        }
        Command::Evaluate { checkpoint, split } => {
            if !checkpoint.join("manifest.json").exists() {
                bail!("no checkpoint at {}", checkpoint.display());
            }
            let ws = Workspace::open(&cfg)?;
            let model = IntentModel::load(checkpoint, &ws.vocab.hash())
                .with_context(|| format!("loading {}", checkpoint.display()))?;
            let split = match split {
                SplitArg::Dev => Split::Dev,
                SplitArg::Test => Split::Test,
            };
            let name = checkpoint.file_name().map_or("model".into(), |n| n.to_string_lossy().into_owned());
            let report = build_report(&name, &model, &ws.eval_set(split)?)?;
            let dir = cfg.run_dir("evaluate").join(&name);
            report.write(&dir)?;
            cfg.write_resolved(&dir)?;
            print!("{}", report.to_markdown());
        }
        Command::Ablate => {
            let outcome = run_ablation(&cfg)?;
            print!("{}", fs::read_to_string(outcome.run_dir.join("report.md"))?);
            let failed = outcome.rows.iter().filter(|r| r.error.is_some()).count();
            if failed > 0 {
                bail!("{failed} ablation row(s) failed; see {}", outcome.run_dir.display());
            }
        }
        Command::ExportEmbeddings { checkpoint, stage, out } => {
            let ws = Workspace::open(&cfg)?;
            let encoder = match checkpoint {
                Some(dir) => {
                    if !dir.join("manifest.json").exists() {
                        bail!("no checkpoint at {}", dir.display());
                    }
                    load_any_encoder(dir, &ws.vocab.hash())?
                }
                None => ws.pretrained_encoder(Stage::from(*stage))?.0,
            };
            let sample = ws.probe_sample()?;
            let u = encoder.embed(&sample.seqs, 64)?;
            let dim = cfg.probe.pca_dim.min(encoder.config().d_model).min(u.len());
            let pca = pca_reduce(&u, dim)?;
            let path = out.clone().unwrap_or_else(|| cfg.run_dir("embeddings").join("embeddings.csv"));
            if let Some(parent) = path.parent() {
                fs::create_dir_all(parent)?;
                cfg.write_resolved(parent)?;
            }
            let truth: Vec<Option<String>> = sample.intents.into_iter().map(Some).collect();
            write_embeddings_csv(&path, &sample.ids, &truth, &pca.projected)?;
            println!("{} vectors reduced to {dim} dims written to {}", u.len(), path.display());
        }
    }
    Ok(())
}
