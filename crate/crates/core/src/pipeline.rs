//! End-to-end experiment driver: optional Stage 1, optional Stage 2,
//! N-shot pool, nearest-neighbour (or MLP) classification, reports.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::{self, Write as _};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::baseline::{mlp_predict, train_mlp, MlpConfig, MlpParams};
use crate::checkpoint::{Checkpoint, TrainingMetadata};
use crate::data::{read_response_pairs, read_task_data, LabeledUtterance, ResponsePair};
use crate::encoder::{write_vectors_tsv, EmbeddingStore, Encoder, EncoderConfig, EncoderParams};
use crate::error::{Error, Result};
use crate::inference::{augment_pool, build_pool, classify_rows, write_labels, ExemplarPool};
use crate::losses::{LossConfig, LossKind};
use crate::metrics::{evaluate_runs, silhouette, Distance, EvalReport};
use crate::optim::OptimConfig;
use crate::pairing::{sample_few_shot, DEFAULT_MAX_POSITIVES_PER_ANCHOR};
use crate::synthetic::{generate_synthetic, SyntheticSpec};
use crate::tensor::Tensor;
use crate::trainer::{train_stage1, train_stage2, Stage2Options};

/// Examples per intent available for Stage 2 and the inference pool.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "serde_json::Value", into = "serde_json::Value")]
pub enum NShot {
    Shots(usize),
    Full,
}

impl NShot {
    /// Stage 2 epochs: 10 for 10-shot, 5 for 30-shot, 2 otherwise.
    pub fn default_epochs(self) -> usize {
        match self {
            NShot::Shots(n) if n <= 10 => 10,
            NShot::Shots(n) if n <= 30 => 5,
            _ => 2,
        }
    }

    /// Negatives per positive: 3 in few-shot setups, 1 on the full set.
    pub fn default_negatives(self) -> usize {
        match self {
            NShot::Shots(_) => 3,
            NShot::Full => 1,
        }
    }
}

impl fmt::Display for NShot {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NShot::Shots(n) => write!(f, "{n}"),
            NShot::Full => f.write_str("full"),
        }
    }
}

impl FromStr for NShot {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "full" => Ok(NShot::Full),
            other => match other.parse::<usize>() {
                Ok(n) if n >= 1 => Ok(NShot::Shots(n)),
                _ => Err(Error::Config(format!(
                    "N-shot must be a positive count or `full`, got `{s}`"
                ))),
            },
        }
    }
}

impl TryFrom<serde_json::Value> for NShot {
    type Error = Error;

    fn try_from(v: serde_json::Value) -> Result<Self> {
        match v {
            serde_json::Value::Number(n) => n.to_string().parse(),
            serde_json::Value::String(s) => s.parse(),
            other => Err(Error::Config(format!("bad N-shot value {other}"))),
        }
    }
}

impl From<NShot> for serde_json::Value {
    fn from(n: NShot) -> Self {
        match n {
            NShot::Shots(k) => k.into(),
            NShot::Full => "full".into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Classifier {
    /// kNN whenever Stage 2 runs or no stage runs, MLP after Stage 1 alone.
    #[default]
    Auto,
    Knn,
    Mlp,
}

/// Where task data comes from: files, or the synthetic generator.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct DataPaths {
    pub train: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub s1_corpus: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub data: DataPaths,
    pub synthetic: SyntheticSpec,
    pub run_s1: bool,
    pub run_s2: bool,
    pub loss_kind: LossKind,
    /// Negatives per positive; `None` picks by N-shot.
    pub n: Option<usize>,
    pub n_shot: NShot,
    pub seeds: Vec<u64>,
    pub k: usize,
    pub classifier: Classifier,
    pub distance: Distance,
    pub encoder: EncoderConfig,
    pub loss: LossConfig,
    pub s1_optim: OptimConfig,
    /// `epochs` of 0 here means "pick by N-shot".
    pub s2_optim: OptimConfig,
    pub max_positives_per_anchor: usize,
    pub mlp: MlpConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            data: DataPaths::default(),
            synthetic: SyntheticSpec::default(),
            run_s1: false,
            run_s2: true,
            loss_kind: LossKind::Ocl,
            n: None,
            n_shot: NShot::Shots(10),
            seeds: vec![1, 2, 3],
            k: 1,
            classifier: Classifier::Auto,
            distance: Distance::Cosine,
            encoder: EncoderConfig::default(),
            loss: LossConfig::default(),
            s1_optim: OptimConfig {
                lr: 1e-2,
                epochs: 2,
                batch_size: 32,
                ..OptimConfig::default()
            },
            s2_optim: OptimConfig {
                lr: 1e-2,
                epochs: 0,
                batch_size: 32,
                ..OptimConfig::default()
            },
            max_positives_per_anchor: DEFAULT_MAX_POSITIVES_PER_ANCHOR,
            mlp: MlpConfig::default(),
        }
    }
}

impl ExperimentConfig {
    /// Settings sized for the synthetic task on a single CPU core: a small
    /// hash table and unigram features.
    pub fn desk() -> Self {
        Self {
            encoder: EncoderConfig {
                hash_buckets: 1 << 12,
                ngram_orders: BTreeSet::from([1]),
                ..EncoderConfig::default()
            },
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        if self.k == 0 {
            return Err(Error::Config("k must be at least 1".into()));
        }
        self.encoder.validate()?;
        self.loss.validate()?;
        self.s1_optim.validate()?;
        self.s2_optim.validate()?;
        self.mlp.validate()?;
        if self.n == Some(0) {
            return Err(Error::Config("n must be at least 1".into()));
        }
        if self.run_s1 && self.encoder.mode == crate::encoder::EncoderMode::External {
            return Err(Error::Config(
                "stage 1 needs a trainable-mode encoder".into(),
            ));
        }
        for p in [&self.data.train, &self.data.test].into_iter().flatten() {
            if !p.exists() {
                return Err(Error::Config(format!("{} does not exist", p.display())));
            }
        }
        if self.data.train.is_some() != self.data.test.is_some() {
            return Err(Error::Config(
                "train and test data must be given together".into(),
            ));
        }
        if let Some(p) = &self.data.s1_corpus {
            if !p.exists() {
                return Err(Error::Config(format!("{} does not exist", p.display())));
            }
        }
        if self.data.train.is_none() {
            self.synthetic.validate()?;
        }
        Ok(())
    }

    pub fn classifier(&self) -> Classifier {
        match self.classifier {
            Classifier::Auto if self.run_s1 && !self.run_s2 => Classifier::Mlp,
            Classifier::Auto => Classifier::Knn,
            c => c,
        }
    }

    pub fn negatives(&self) -> usize {
        self.n.unwrap_or_else(|| self.n_shot.default_negatives())
    }

    pub fn s2_epochs(&self) -> usize {
        if self.s2_optim.epochs == 0 {
            self.n_shot.default_epochs()
        } else {
            self.s2_optim.epochs
        }
    }

    /// Row label in the style `+S1+S2-ocl`.
    pub fn variant_name(&self) -> String {
        let mut s = String::new();
        if self.run_s1 {
            s.push_str("+S1");
        }
        if self.run_s2 {
            write!(s, "+S2-{}", self.loss_kind).expect("string write");
        }
        if s.is_empty() {
            s.push_str("untrained");
        }
        if self.classifier() == Classifier::Mlp {
            s.push_str(" (mlp)");
        }
        s
    }
}

/// Task data and response corpus for an experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentData {
    pub train: Vec<LabeledUtterance>,
    pub test: Vec<LabeledUtterance>,
    pub s1_corpus: Vec<ResponsePair>,
}

impl ExperimentData {
    pub fn load(cfg: &ExperimentConfig) -> Result<Self> {
        let (train, test, mut s1_corpus) = match (&cfg.data.train, &cfg.data.test) {
            (Some(tr), Some(te)) => (read_task_data(tr)?, read_task_data(te)?, Vec::new()),
            _ => {
                let d = generate_synthetic(&cfg.synthetic)?;
                (d.train, d.test, d.s1_corpus)
            }
        };
        if let Some(p) = &cfg.data.s1_corpus {
            s1_corpus = read_response_pairs(p)?;
        }
        if cfg.run_s1 && s1_corpus.is_empty() {
            return Err(Error::Config(
                "stage 1 requested but no response corpus is available".into(),
            ));
        }
        Ok(Self {
            train,
            test,
            s1_corpus,
        })
    }
}

/// The N-shot subset used for Stage 2 and as the inference pool.
pub fn pool_data(
    train: &[LabeledUtterance],
    n_shot: NShot,
    seed: u64,
) -> Result<Vec<LabeledUtterance>> {
    match n_shot {
        NShot::Shots(n) => sample_few_shot(train, n, seed),
        NShot::Full => Ok(train.to_vec()),
    }
}

/// Trains the encoder for one seed as configured. The returned checkpoint
/// holds whatever stages ran; an untrained encoder is tagged `init`.
pub fn train_encoder(
    cfg: &ExperimentConfig,
    data: &ExperimentData,
    pool: &[LabeledUtterance],
    seed: u64,
) -> Result<Checkpoint> {
    let params = EncoderParams::init(&cfg.encoder, seed)?;
    let mut ck = Checkpoint::from_encoder_params(
        &cfg.encoder,
        &params,
        TrainingMetadata {
            stage: "init".into(),
            seed,
            ..TrainingMetadata::default()
        },
    );
    if cfg.run_s1 {
        let opt = OptimConfig {
            seed,
            ..cfg.s1_optim.clone()
        };
        ck = train_stage1(&data.s1_corpus, &cfg.encoder, params, &opt, &cfg.loss)?.checkpoint;
    }
    if cfg.run_s2 {
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
        ck = train_stage2(pool, &opts, &cfg.encoder, Some(&ck), &opt, &cfg.loss, None)?.checkpoint;
    }
    Ok(ck)
}

/// Predicted label per query; queries that cannot be scored (zero vectors)
/// come back as `None` and count as wrong.
pub fn knn_predictions(
    queries: &Tensor,
    pool: &ExemplarPool,
    k: usize,
) -> Result<Vec<Option<String>>> {
    classify_rows(queries, pool, k)
        .into_iter()
        .map(|r| match r {
            Ok(p) => Ok(Some(p.label)),
            Err(Error::DegenerateVector(_)) => Ok(None),
            Err(e) => Err(e),
        })
        .collect()
}

/// Silhouette over the nonzero rows of `vectors`, or `None` when fewer
/// than two labels remain.
pub fn test_silhouette(
    vectors: &Tensor,
    labels: &[String],
    distance: Distance,
) -> Result<Option<f64>> {
    let keep: Vec<usize> = (0..vectors.rows())
        .filter(|&i| vectors.row(i).iter().any(|&x| x != 0.0))
        .collect();
    let kept_labels: Vec<&str> = keep.iter().map(|&i| labels[i].as_str()).collect();
    let mut distinct = kept_labels.clone();
    distinct.sort_unstable();
    distinct.dedup();
    if keep.len() < 2 || distinct.len() < 2 {
        return Ok(None);
    }
    let rows: Vec<Vec<f64>> = keep.iter().map(|&i| vectors.row(i).to_vec()).collect();
    Ok(Some(silhouette(
        &Tensor::from_rows(&rows)?,
        &kept_labels,
        distance,
    )?))
}

fn report(
    preds: &[Option<String>],
    test: &[LabeledUtterance],
    seed: u64,
    cfg: &ExperimentConfig,
    sil: Option<f64>,
) -> Result<EvalReport> {
    let preds: Vec<&str> = preds.iter().map(|p| p.as_deref().unwrap_or("")).collect();
    let gold: Vec<&str> = test.iter().map(|u| u.label.as_str()).collect();
    EvalReport::from_predictions(&preds, &gold, seed, cfg.distance, sil)
}

/// Everything produced for one seed.
#[derive(Debug, Clone)]
pub struct SeedRun {
    pub seed: u64,
    pub report: EvalReport,
    pub checkpoint: Checkpoint,
    pub mlp: Option<MlpParams>,
}

pub fn run_seed(cfg: &ExperimentConfig, data: &ExperimentData, seed: u64) -> Result<SeedRun> {
    let pool_utts = pool_data(&data.train, cfg.n_shot, seed)?;
    let checkpoint = train_encoder(cfg, data, &pool_utts, seed)?;
    let encoder = checkpoint.encoder()?;
    let queries = encoder.encode_utterances(&data.test, None)?;
    let gold: Vec<String> = data.test.iter().map(|u| u.label.clone()).collect();
    let sil = test_silhouette(&queries, &gold, cfg.distance)?;

    let (preds, mlp) = match cfg.classifier() {
        Classifier::Mlp => {
            let x = encoder.encode_utterances(&pool_utts, None)?;
            let labels: Vec<&str> = pool_utts.iter().map(|u| u.label.as_str()).collect();
            let params = train_mlp(
                &x,
                &labels,
                &MlpConfig {
                    seed,
                    ..cfg.mlp.clone()
                },
            )?;
            let preds = mlp_predict(&queries, &params)?
                .into_iter()
                .map(Some)
                .collect();
            (preds, Some(params))
        }
        _ => {
            let pool = build_pool(&pool_utts, &encoder, None)?;
            (knn_predictions(&queries, &pool, cfg.k)?, None)
        }
    };
    Ok(SeedRun {
        seed,
        report: report(&preds, &data.test, seed, cfg, sil)?,
        checkpoint,
        mlp,
    })
}

#[derive(Debug, Clone)]
pub struct PipelineOutcome {
    pub variant: String,
    pub n_shot: NShot,
    pub aggregate: EvalReport,
    pub runs: Vec<SeedRun>,
}

/// Runs every seed and aggregates. Configuration problems surface before
/// any training starts.
pub fn run_pipeline(cfg: &ExperimentConfig) -> Result<PipelineOutcome> {
    cfg.validate()?;
    let data = ExperimentData::load(cfg)?;
    run_pipeline_on(cfg, &data)
}

pub fn run_pipeline_on(cfg: &ExperimentConfig, data: &ExperimentData) -> Result<PipelineOutcome> {
    cfg.validate()?;
    let runs = cfg
        .seeds
        .iter()
        .map(|&s| run_seed(cfg, data, s))
        .collect::<Result<Vec<_>>>()?;
    let reports: Vec<EvalReport> = runs.iter().map(|r| r.report.clone()).collect();
    Ok(PipelineOutcome {
        variant: cfg.variant_name(),
        n_shot: cfg.n_shot,
        aggregate: evaluate_runs(&reports)?,
        runs,
    })
}

/// Plain-text table: one row per variant, one column per N-shot setup,
/// cells are mean accuracy ×100.
pub fn format_table(rows: &[(String, BTreeMap<NShot, EvalReport>)]) -> String {
    let mut cols: Vec<NShot> = rows.iter().flat_map(|(_, m)| m.keys().copied()).collect();
    cols.sort();
    cols.dedup();
    let width = rows.iter().map(|(v, _)| v.len()).max().unwrap_or(0).max(7);
    let mut out = format!("{:<width$}", "variant");
    for c in &cols {
        let head = match c {
            NShot::Full => "Full".to_string(),
            NShot::Shots(n) => n.to_string(),
        };
        write!(out, " | {head:>12}").expect("string write");
    }
    out.push('\n');
    out.push_str(&"-".repeat(width + cols.len() * 15));
    out.push('\n');
    for (variant, cells) in rows {
        write!(out, "{variant:<width$}").expect("string write");
        for c in &cols {
            match cells.get(c) {
                Some(r) => write!(out, " | {:>6.2} ±{:>5.2}", 100.0 * r.mean, 100.0 * r.std),
                None => write!(out, " | {:>12}", "-"),
            }
            .expect("string write");
        }
        out.push('\n');
    }
    out
}

/// Writes `report.json`, `table.txt` and one checkpoint per seed.
pub fn write_outputs(outcome: &PipelineOutcome, out_dir: &Path) -> Result<()> {
    std::fs::create_dir_all(out_dir)?;
    let mut json = serde_json::to_vec_pretty(&outcome.aggregate)?;
    json.push(b'\n');
    std::fs::write(out_dir.join("report.json"), json)?;
    let cells = BTreeMap::from([(outcome.n_shot, outcome.aggregate.clone())]);
    std::fs::write(
        out_dir.join("table.txt"),
        format_table(&[(outcome.variant.clone(), cells)]),
    )?;
    for run in &outcome.runs {
        run.checkpoint
            .save(&out_dir.join(format!("encoder-seed{}.cfit", run.seed)))?;
    }
    Ok(())
}

/// Writes one vector per utterance in store TSV format plus an
/// `id<TAB>label` sidecar carrying the encoder fingerprint.
pub fn export_embeddings(
    encoder: &Encoder,
    data: &[LabeledUtterance],
    store: Option<&EmbeddingStore>,
    vectors_path: &Path,
    labels_path: &Path,
) -> Result<()> {
    let vectors = encoder.encode_utterances(data, store)?;
    write_vectors_tsv(
        vectors_path,
        vectors.cols(),
        data.iter()
            .enumerate()
            .map(|(i, u)| (u.id.as_str(), vectors.row(i))),
    )?;
    write_labels(
        labels_path,
        encoder.fingerprint(),
        data.iter().map(|u| (&u.id, &u.label)),
    )
}

/// Accuracy of one trained encoder against pools of growing size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub seed: u64,
    /// `(pool description, pool rows, accuracy)`.
    pub pools: Vec<(String, usize, f64)>,
}

/// Trains at `cfg.n_shot` once per seed, then classifies the test set with
/// the training pool, with pools of each size in `larger` (by adding
/// examples without retraining), and with the full training set.
pub fn augment_probe(
    cfg: &ExperimentConfig,
    data: &ExperimentData,
    larger: &[usize],
) -> Result<Vec<ProbeResult>> {
    cfg.validate()?;
    let mut out = Vec::new();
    for &seed in &cfg.seeds {
        let base = pool_data(&data.train, cfg.n_shot, seed)?;
        let ck = train_encoder(cfg, data, &base, seed)?;
        let encoder = ck.encoder()?;
        let queries = encoder.encode_utterances(&data.test, None)?;
        let gold: Vec<&str> = data.test.iter().map(|u| u.label.as_str()).collect();
        let pool = build_pool(&base, &encoder, None)?;
        let score = |pool: &ExemplarPool| -> Result<f64> {
            let preds = knn_predictions(&queries, pool, cfg.k.min(pool.len()))?;
            let preds: Vec<&str> = preds.iter().map(|p| p.as_deref().unwrap_or("")).collect();
            crate::metrics::accuracy(&preds, &gold)
        };
        let mut pools = vec![(format!("{}-shot", cfg.n_shot), pool.len(), score(&pool)?)];
        let base_ids: BTreeSet<&str> = base.iter().map(|u| u.id.as_str()).collect();
        for &n in larger {
            // Grow the same pool: keep the training shots, add new ones.
            let bigger = sample_superset(&data.train, &base, n, seed)?;
            let extra: Vec<LabeledUtterance> = bigger
                .into_iter()
                .filter(|u| !base_ids.contains(u.id.as_str()))
                .collect();
            let p = augment_pool(&pool, &extra, &encoder, None)?;
            pools.push((format!("{n}-shot"), p.len(), score(&p)?));
        }
        let rest: Vec<LabeledUtterance> = data
            .train
            .iter()
            .filter(|u| !base_ids.contains(u.id.as_str()))
            .cloned()
            .collect();
        let full = augment_pool(&pool, &rest, &encoder, None)?;
        pools.push(("full".into(), full.len(), score(&full)?));
        out.push(ProbeResult { seed, pools });
    }
    Ok(out)
}

/// `n` examples per class that include every example of `base`.
fn sample_superset(
    train: &[LabeledUtterance],
    base: &[LabeledUtterance],
    n: usize,
    seed: u64,
) -> Result<Vec<LabeledUtterance>> {
    let base_ids: BTreeSet<&str> = base.iter().map(|u| u.id.as_str()).collect();
    let mut per_class: BTreeMap<&str, usize> = BTreeMap::new();
    for u in base {
        *per_class.entry(u.label.as_str()).or_default() += 1;
    }
    let rest: Vec<LabeledUtterance> = train
        .iter()
        .filter(|u| !base_ids.contains(u.id.as_str()))
        .cloned()
        .collect();
    let mut out = base.to_vec();
    let mut by_class: BTreeMap<String, Vec<LabeledUtterance>> = BTreeMap::new();
    for u in rest {
        by_class.entry(u.label.clone()).or_default().push(u);
    }
    for (label, members) in by_class {
        let have = per_class.get(label.as_str()).copied().unwrap_or(0);
        let need = n.saturating_sub(have);
        if need == 0 {
            continue;
        }
        if members.len() < need {
            return Err(Error::UndersizedClass {
                label,
                requested: n,
                available: have + members.len(),
            });
        }
        out.extend(sample_few_shot(&members, need, seed)?);
    }
    Ok(out)
}
