use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use convfit::baseline::{mlp_predict, train_mlp, MlpConfig};
use convfit::data::{read_response_pairs, read_task_data, write_response_pairs, write_task_data};
use convfit::inference::{build_pool, classify, classify_utterances};
use convfit::pairing::PairFile;
use convfit::pipeline::{
    augment_probe, export_embeddings, format_table, pool_data, run_pipeline, test_silhouette,
    write_outputs, ExperimentData,
};
use convfit::{
    accuracy, generate_synthetic, train_stage1, train_stage2, Checkpoint, Distance, EmbeddingStore,
    Encoder, EncoderParams, EvalReport, ExperimentConfig, LossKind, NShot, OptimConfig,
    Stage2Options,
};

#[derive(Parser, Debug)]
#[command(
    name = "convfit",
    version,
    about = "Conversational fine-tuning and similarity-based intent detection"
)]
struct Cli {
    /// Experiment configuration (JSON). Missing fields take defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Overrides the seed list with a single seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    #[arg(long, global = true, default_value = "out")]
    out_dir: PathBuf,

    /// Neighbours consulted by the kNN classifier.
    #[arg(long, global = true)]
    k: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write the synthetic task (train/test) and response corpus as JSONL.
    /// Here `--seed` picks the dataset.
    GenData,
    /// Response-selection training on a (context, response) corpus.
    S1Train {
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// Continue from this checkpoint instead of a fresh encoder.
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// Task tuning on labeled utterances.
    S2Train {
        #[arg(long)]
        train: Option<PathBuf>,
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long)]
        loss: Option<LossKind>,
        #[arg(long)]
        n: Option<usize>,
        /// Subsample this many examples per intent first (or `full`).
        #[arg(long)]
        n_shot: Option<NShot>,
        /// Write the positive/negative pair set as JSON.
        #[arg(long)]
        pairs_out: Option<PathBuf>,
        #[command(flatten)]
        store: StoreArg,
    },
    /// Run the configured experiment over all seeds and write reports.
    Eval {
        #[arg(long)]
        n_shot: Option<NShot>,
    },
    /// Classify one utterance against a labeled pool.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        pool: PathBuf,
        text: String,
    },
    /// Silhouette of a dataset's embeddings under a checkpoint.
    Silhouette {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        distance: Option<Distance>,
        #[command(flatten)]
        store: StoreArg,
    },
    /// Write embeddings in store TSV format with a labels sidecar.
    ExportEmbeddings {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        store: StoreArg,
    },
    /// Train at the configured N-shot, then score pools of growing size.
    AugmentProbe {
        /// Intermediate pool sizes per intent.
        #[arg(long, value_delimiter = ',', default_value = "30")]
        sizes: Vec<usize>,
    },
    /// Train an MLP on frozen embeddings and score the test set.
    MlpBaseline {
        /// Encoder to freeze; an untrained one from the config otherwise.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        train: Option<PathBuf>,
        #[arg(long)]
        test: Option<PathBuf>,
        #[command(flatten)]
        store: StoreArg,
    },
}

#[derive(Args, Debug)]
struct StoreArg {
    /// Precomputed utterance vectors for external-mode encoders.
    #[arg(long)]
    store: Option<PathBuf>,
}

impl StoreArg {
    fn load(&self) -> Result<Option<EmbeddingStore>> {
        self.store
            .as_deref()
            .map(|p| {
                EmbeddingStore::read_tsv(p).with_context(|| format!("reading {}", p.display()))
            })
            .transpose()
    }
}

/// Problems with the invocation or configuration, as opposed to failures
/// while running.
#[derive(Debug)]
struct ConfigError(String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

fn is_config_error(err: &anyhow::Error) -> bool {
    err.chain().any(|e| {
        e.is::<ConfigError>()
            || matches!(
                e.downcast_ref::<convfit::Error>(),
                Some(convfit::Error::Config(_) | convfit::Error::Synthetic(_))
            )
    })
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| ConfigError(format!("cannot read {}: {e}", p.display())))?;
            serde_json::from_str(&text).map_err(|e| ConfigError(format!("{}: {e}", p.display())))?
        }
        None => ExperimentConfig::desk(),
    };
    if let Some(seed) = cli.seed {
        cfg.seeds = vec![seed];
    }
    if let Some(k) = cli.k {
        cfg.k = k;
    }
    Ok(cfg)
}

fn first_seed(cfg: &ExperimentConfig) -> Result<u64> {
    cfg.seeds
        .first()
        .copied()
        .ok_or_else(|| ConfigError("at least one seed is required".into()).into())
}

fn require<'a>(
    flag: Option<&'a PathBuf>,
    fallback: Option<&'a PathBuf>,
    what: &str,
) -> Result<&'a Path> {
    flag.or(fallback)
        .map(PathBuf::as_path)
        .ok_or_else(|| ConfigError(format!("no {what} given (flag or config)")).into())
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    std::fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = load_config(&cli)?;
    let out = cli.out_dir.as_path();
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;

    match &cli.command {
        Command::GenData => {
            if let Some(seed) = cli.seed {
                cfg.synthetic.seed = seed;
            }
            let data = generate_synthetic(&cfg.synthetic)?;
            write_task_data(&out.join("train.jsonl"), &data.train)?;
            write_task_data(&out.join("test.jsonl"), &data.test)?;
            write_response_pairs(&out.join("s1.jsonl"), &data.s1_corpus)?;
            println!(
                "wrote {} train, {} test, {} corpus pairs (nearest-centroid check {:.3})",
                data.train.len(),
                data.test.len(),
                data.s1_corpus.len(),
                data.centroid_accuracy
            );
        }
        Command::S1Train { corpus, init } => {
            cfg.encoder.validate()?;
            let seed = first_seed(&cfg)?;
            let path = require(
                corpus.as_ref(),
                cfg.data.s1_corpus.as_ref(),
                "response corpus",
            )?;
            let corpus = read_response_pairs(path)?;
            let params = match init {
                Some(p) => {
                    let ck = load_checkpoint(p)?;
                    if ck.encoder_config != cfg.encoder {
                        return Err(ConfigError(
                            "init checkpoint encoder config differs from the configuration".into(),
                        )
                        .into());
                    }
                    ck.encoder_params()?
                }
                None => EncoderParams::init(&cfg.encoder, seed)?,
            };
            let opt = OptimConfig {
                seed,
                ..cfg.s1_optim.clone()
            };
            let outcome = train_stage1(&corpus, &cfg.encoder, params, &opt, &cfg.loss)?;
            let path = out.join("s1.cfit");
            outcome.checkpoint.save(&path)?;
            let last = outcome.epoch_losses.last().copied().unwrap_or(f64::NAN);
            println!(
                "stage 1: {} steps, final epoch loss {last:.4} -> {}",
                outcome.step_losses.len(),
                path.display()
            );
        }
        Command::S2Train {
            train,
            init,
            loss,
            n,
            n_shot,
            pairs_out,
            store,
        } => {
            let seed = first_seed(&cfg)?;
            if let Some(kind) = loss {
                cfg.loss_kind = *kind;
            }
            if let Some(shots) = n_shot {
                cfg.n_shot = *shots;
            }
            if let Some(n) = n {
                cfg.n = Some(*n);
            }
            cfg.encoder.validate()?;
            let path = require(train.as_ref(), cfg.data.train.as_ref(), "training data")?;
            let data = pool_data(&read_task_data(path)?, cfg.n_shot, seed)?;
            let init = init.as_deref().map(load_checkpoint).transpose()?;
            let store = store.load()?;
            let opt = OptimConfig {
                seed,
                epochs: cfg.s2_epochs(),
                ..cfg.s2_optim.clone()
            };
            let opts = Stage2Options {
                loss_kind: cfg.loss_kind,
                n: cfg.negatives(),
                max_positives_per_anchor: cfg.max_positives_per_anchor,
            };
            let outcome = train_stage2(
                &data,
                &opts,
                &cfg.encoder,
                init.as_ref(),
                &opt,
                &cfg.loss,
                store.as_ref(),
            )?;
            let path = out.join("s2.cfit");
            outcome.checkpoint.save(&path)?;
            if let (Some(dest), Some(pairs)) = (pairs_out, &outcome.pairs) {
                write_json(dest, &PairFile::from_pairs(pairs, &data))?;
            }
            let last = outcome.epoch_losses.last().copied().unwrap_or(f64::NAN);
            println!(
                "stage 2 ({}, n={}): {} utterances, {} steps, final epoch loss {last:.4} -> {}",
                cfg.loss_kind,
                opts.n,
                data.len(),
                outcome.step_losses.len(),
                path.display()
            );
        }
        Command::Eval { n_shot } => {
            if let Some(shots) = n_shot {
                cfg.n_shot = *shots;
            }
            let outcome = run_pipeline(&cfg)?;
            write_outputs(&outcome, out)?;
            let cells = BTreeMap::from([(outcome.n_shot, outcome.aggregate.clone())]);
            print!("{}", format_table(&[(outcome.variant.clone(), cells)]));
            println!("per-seed accuracy: {:?}", outcome.aggregate.runs);
        }
        Command::Predict {
            checkpoint,
            pool,
            text,
        } => {
            let encoder = load_checkpoint(checkpoint)?.encoder()?;
            let pool = build_pool(&read_task_data(pool)?, &encoder, None)?;
            let k = cfg.k.min(pool.len());
            let pred = classify(text, &pool, k, &encoder)?;
            println!("{}", pred.label);
            for nb in &pred.neighbors {
                println!("  {:.4}\t{}\t{}", nb.similarity, nb.label, nb.id);
            }
        }
        Command::Silhouette {
            checkpoint,
            data,
            distance,
            store,
        } => {
            let encoder = match checkpoint {
                Some(p) => load_checkpoint(p)?.encoder()?,
                None => Encoder::new(
                    cfg.encoder.clone(),
                    EncoderParams::init(&cfg.encoder, first_seed(&cfg)?)?,
                )?,
            };
            let data = read_task_data(data)?;
            let vectors = encoder.encode_utterances(&data, store.load()?.as_ref())?;
            let labels: Vec<String> = data.iter().map(|u| u.label.clone()).collect();
            let distance = distance.unwrap_or(cfg.distance);
            match test_silhouette(&vectors, &labels, distance)? {
                Some(s) => println!("silhouette ({distance}): {s:.4}"),
                None => {
                    return Err(ConfigError(
                        "silhouette needs at least two labels with nonzero vectors".into(),
                    )
                    .into())
                }
            }
        }
        Command::ExportEmbeddings {
            checkpoint,
            data,
            out: dest,
            store,
        } => {
            let encoder = load_checkpoint(checkpoint)?.encoder()?;
            let data = read_task_data(data)?;
            let labels = dest.with_extension("labels.tsv");
            export_embeddings(&encoder, &data, store.load()?.as_ref(), dest, &labels)?;
            println!(
                "wrote {} vectors to {} and labels to {}",
                data.len(),
                dest.display(),
                labels.display()
            );
        }
        Command::AugmentProbe { sizes } => {
            cfg.validate()?;
            let data = ExperimentData::load(&cfg)?;
            let results = augment_probe(&cfg, &data, sizes)?;
            write_json(&out.join("augment-probe.json"), &results)?;
            for r in &results {
                let cells: Vec<String> = r
                    .pools
                    .iter()
                    .map(|(name, rows, acc)| format!("{name} ({rows}): {acc:.3}"))
                    .collect();
                println!("seed {}: {}", r.seed, cells.join(", "));
            }
        }
        Command::MlpBaseline {
            checkpoint,
            train,
            test,
            store,
        } => {
            let seed = first_seed(&cfg)?;
            cfg.mlp.validate()?;
            let encoder = match checkpoint {
                Some(p) => load_checkpoint(p)?.encoder()?,
                None => Encoder::new(
                    cfg.encoder.clone(),
                    EncoderParams::init(&cfg.encoder, seed)?,
                )?,
            };
            let (train, test) = match (train, test) {
                (Some(a), Some(b)) => (read_task_data(a)?, read_task_data(b)?),
                (None, None) => {
                    let data = ExperimentData::load(&cfg)?;
                    (data.train, data.test)
                }
                _ => {
                    return Err(
                        ConfigError("--train and --test must be given together".into()).into(),
                    )
                }
            };
            let train = pool_data(&train, cfg.n_shot, seed)?;
            let store = store.load()?;
            let x = encoder.encode_utterances(&train, store.as_ref())?;
            let labels: Vec<&str> = train.iter().map(|u| u.label.as_str()).collect();
            let mlp_cfg = MlpConfig {
                seed,
                ..cfg.mlp.clone()
            };
            let params = train_mlp(&x, &labels, &mlp_cfg)?;
            let preds = mlp_predict(&encoder.encode_utterances(&test, store.as_ref())?, &params)?;
            let gold: Vec<&str> = test.iter().map(|u| u.label.as_str()).collect();
            let report = EvalReport::from_predictions(&preds, &gold, seed, cfg.distance, None)?;
            params
                .to_checkpoint(encoder.config(), &mlp_cfg)
                .save(&out.join("mlp.cfit"))?;
            write_json(&out.join("mlp-report.json"), &report)?;
            println!(
                "mlp on frozen embeddings: accuracy {:.4} over {} test utterances",
                report.accuracy, report.n
            );
            // Nearest-neighbour accuracy with the same pool, for comparison.
            let pool = build_pool(&train, &encoder, store.as_ref())?;
            let knn = classify_utterances(
                &test,
                &pool,
                cfg.k.min(pool.len()),
                &encoder,
                store.as_ref(),
            )?;
            let knn_labels: Vec<String> = knn
                .into_iter()
                .map(|p| p.map(|p| p.label).unwrap_or_default())
                .collect();
            println!(
                "kNN with the same pool: accuracy {:.4}",
                accuracy(&knn_labels, &gold)?
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(if is_config_error(&err) { 1 } else { 2 })
        }
    }
}
