//! Stage 1 (response ranking) and Stage 2 (intent pair) training loops.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;

use crate::checkpoint::{Checkpoint, TrainingMetadata};
use crate::data::{LabeledUtterance, ResponsePair};
use crate::encoder::{
    encode, encode_external, encode_features, fingerprint, EmbeddingStore, EncoderConfig,
    EncoderMode, EncoderParams,
};
use crate::error::{Error, Result};
use crate::losses::{cos_loss, mneg_loss, ocl_loss, smax_loss, LossConfig, LossKind, SmaxHead};
use crate::optim::{adamw_step, lr_at, AdamState, OptimConfig, ParamUpdate};
use crate::pairing::{
    build_pairs_capped, make_mneg_batches, Pair, PairSet, DEFAULT_MAX_POSITIVES_PER_ANCHOR,
};
use crate::rng::{seeded, Stream};
use crate::tensor::Tape;

pub const SMAX_WEIGHT: &str = "smax_weight";

/// A trained checkpoint plus the loss trace that produced it.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    /// Loss of every optimizer step, in order.
    pub step_losses: Vec<f64>,
    /// Mean step loss per epoch.
    pub epoch_losses: Vec<f64>,
    /// Stage 2 only: the pairs trained on.
    pub pairs: Option<PairSet>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Stage2Options {
    pub loss_kind: LossKind,
    pub n: usize,
    pub max_positives_per_anchor: usize,
}

impl Default for Stage2Options {
    fn default() -> Self {
        Self {
            loss_kind: LossKind::Ocl,
            n: 3,
            max_positives_per_anchor: DEFAULT_MAX_POSITIVES_PER_ANCHOR,
        }
    }
}

fn lineage_entry(stage: &str, cfg: &EncoderConfig, params: &EncoderParams) -> String {
    format!("{stage}@{}", fingerprint(cfg, params))
}

fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

fn check_loss(value: f64, step: usize) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFiniteLoss(step))
    }
}

/// Applies one AdamW step to the encoder parameters (and an optional extra
/// tensor such as the SMAX head) from gradients keyed by name.
fn apply_update(
    params: &mut EncoderParams,
    extra: Option<(&'static str, &mut crate::tensor::Tensor)>,
    grads: &BTreeMap<&'static str, Vec<f64>>,
    state: &mut AdamState,
    lr_t: f64,
    opt: &OptimConfig,
) -> Result<()> {
    let mut updates: Vec<ParamUpdate<'_, '_>> = params
        .named_tensors_mut()
        .into_iter()
        .map(|(name, value)| ParamUpdate {
            name,
            value,
            grad: grads.get(name).map(Vec::as_slice),
        })
        .collect();
    if let Some((name, value)) = extra {
        updates.push(ParamUpdate {
            name,
            value,
            grad: grads.get(name).map(Vec::as_slice),
        });
    }
    adamw_step(&mut updates, state, lr_t, opt)
}

/// Stage 1: response ranking over (context, response) pairs, with one
/// encoder applied to both sides.
pub fn train_stage1(
    corpus: &[ResponsePair],
    enc_cfg: &EncoderConfig,
    params: EncoderParams,
    opt: &OptimConfig,
    loss_cfg: &LossConfig,
) -> Result<TrainOutcome> {
    enc_cfg.validate()?;
    opt.validate()?;
    loss_cfg.validate()?;
    if enc_cfg.mode != EncoderMode::Trainable {
        return Err(Error::Config(
            "stage 1 needs a trainable-mode encoder".into(),
        ));
    }
    if params.projection_enabled() {
        return Err(Error::Config(
            "stage 1 trains the encoder without a projection head".into(),
        ));
    }
    params.check(enc_cfg)?;
    if corpus.is_empty() {
        return Err(Error::EmptyInput("stage 1 corpus"));
    }
    if opt.batch_size < 2 || corpus.len() < opt.batch_size {
        return Err(Error::Config(format!(
            "stage 1 needs batch_size >= 2 and a corpus at least that large (batch {}, corpus {})",
            opt.batch_size,
            corpus.len()
        )));
    }

    let lineage = vec![lineage_entry("init", enc_cfg, &params)];
    let mut params = params;
    let per_epoch = corpus.len() / opt.batch_size;
    let total = opt.epochs * per_epoch;
    let mut state = AdamState::default();
    let mut step_losses = Vec::with_capacity(total);
    let mut epoch_losses = Vec::with_capacity(opt.epochs);

    for epoch in 0..opt.epochs {
        let batches =
            make_mneg_batches(corpus, opt.batch_size, opt.seed.wrapping_add(epoch as u64))?;
        let start = step_losses.len();
        for batch in batches {
            let contexts: Vec<&str> = batch.iter().map(|p| p.context.as_str()).collect();
            let responses: Vec<&str> = batch.iter().map(|p| p.response.as_str()).collect();
            let (loss, grads) = {
                let mut tape = Tape::new();
                let bound = params.bind(&mut tape, true);
                let c = encode(&mut tape, &bound, &contexts, enc_cfg)?;
                let r = encode(&mut tape, &bound, &responses, enc_cfg)?;
                let loss = mneg_loss(&mut tape, c, r, loss_cfg)?;
                let value = tape.item(loss);
                check_loss(value, step_losses.len())?;
                tape.backward(loss)?;
                let grads: BTreeMap<_, _> = bound
                    .named()
                    .into_iter()
                    .filter_map(|(name, v)| tape.take_grad(v).map(|g| (name, g)))
                    .collect();
                (value, grads)
            };
            let lr_t = lr_at(step_losses.len(), total, opt)?;
            apply_update(&mut params, None, &grads, &mut state, lr_t, opt)?;
            step_losses.push(loss);
        }
        epoch_losses.push(mean(&step_losses[start..]));
    }

    let metadata = TrainingMetadata {
        stage: "stage1".into(),
        epochs_completed: opt.epochs,
        seed: opt.seed,
        lineage,
        optimizer_reset: true,
        ..TrainingMetadata::default()
    };
    Ok(TrainOutcome {
        checkpoint: Checkpoint::from_encoder_params(enc_cfg, &params, metadata),
        step_losses,
        epoch_losses,
        pairs: None,
    })
}

/// Stage 2: pair-based task tuning on labeled utterances.
///
/// Starts from `init` when given (its config must equal `enc_cfg`),
/// otherwise from fresh parameters. Attaches a projection head if absent.
/// External-mode encoders read utterance vectors from `store` by id.
pub fn train_stage2(
    data: &[LabeledUtterance],
    options: &Stage2Options,
    enc_cfg: &EncoderConfig,
    init: Option<&Checkpoint>,
    opt: &OptimConfig,
    loss_cfg: &LossConfig,
    store: Option<&EmbeddingStore>,
) -> Result<TrainOutcome> {
    enc_cfg.validate()?;
    opt.validate()?;
    loss_cfg.validate()?;
    if enc_cfg.mode == EncoderMode::External && store.is_none() {
        return Err(Error::Config(
            "external-mode encoder needs an embedding store".into(),
        ));
    }

    let (mut params, lineage) = match init {
        Some(ck) => {
            if &ck.encoder_config != enc_cfg {
                return Err(Error::Config(
                    "initial checkpoint was trained with a different encoder config".into(),
                ));
            }
            let params = ck.encoder_params()?;
            let mut lineage = ck.metadata.lineage.clone();
            lineage.push(lineage_entry(&ck.metadata.stage, enc_cfg, &params));
            (params, lineage)
        }
        None => {
            let params = EncoderParams::init(enc_cfg, opt.seed)?;
            let lineage = vec![lineage_entry("init", enc_cfg, &params)];
            (params, lineage)
        }
    };
    params.check(enc_cfg)?;
    params.ensure_projection(enc_cfg, opt.seed);

    let pairs = build_pairs_capped(data, options.n, opt.seed, options.max_positives_per_anchor)?;
    let flat = pairs.interleaved();
    let per_epoch = flat.len().div_ceil(opt.batch_size);
    let total = opt.epochs * per_epoch;

    let bags: Vec<Vec<usize>> = match enc_cfg.mode {
        EncoderMode::Trainable => data.iter().map(|u| enc_cfg.features(&u.text)).collect(),
        EncoderMode::External => Vec::new(),
    };
    let dim = params.output_dim(enc_cfg);
    let mut head = (options.loss_kind == LossKind::Smax).then(|| SmaxHead::xavier(dim, opt.seed));

    let mut state = AdamState::default();
    let mut step_losses = Vec::with_capacity(total);
    let mut epoch_losses = Vec::with_capacity(opt.epochs);

    for epoch in 0..opt.epochs {
        let mut order = flat.clone();
        order.shuffle(&mut seeded(
            opt.seed.wrapping_add(epoch as u64),
            Stream::Shuffle,
        ));
        let start = step_losses.len();
        for batch in order.chunks(opt.batch_size) {
            let (loss, grads) = stage2_step(
                batch,
                data,
                &bags,
                &params,
                head.as_ref(),
                options.loss_kind,
                enc_cfg,
                loss_cfg,
                store,
            )?;
            check_loss(loss, step_losses.len())?;
            let lr_t = lr_at(step_losses.len(), total, opt)?;
            let extra = head.as_mut().map(|h| (SMAX_WEIGHT, &mut h.weight));
            apply_update(&mut params, extra, &grads, &mut state, lr_t, opt)?;
            step_losses.push(loss);
        }
        epoch_losses.push(mean(&step_losses[start..]));
    }

    let metadata = TrainingMetadata {
        stage: "stage2".into(),
        epochs_completed: opt.epochs,
        seed: opt.seed,
        lineage,
        loss_kind: Some(options.loss_kind.to_string()),
        negatives_per_positive: Some(options.n),
        optimizer_reset: true,
        ..TrainingMetadata::default()
    };
    Ok(TrainOutcome {
        checkpoint: Checkpoint::from_encoder_params(enc_cfg, &params, metadata),
        step_losses,
        epoch_losses,
        pairs: Some(pairs),
    })
}

#[allow(clippy::too_many_arguments)]
fn stage2_step(
    batch: &[Pair],
    data: &[LabeledUtterance],
    bags: &[Vec<usize>],
    params: &EncoderParams,
    head: Option<&SmaxHead>,
    kind: LossKind,
    enc_cfg: &EncoderConfig,
    loss_cfg: &LossConfig,
    store: Option<&EmbeddingStore>,
) -> Result<(f64, BTreeMap<&'static str, Vec<f64>>)> {
    // Encode each distinct utterance of the batch once.
    let mut slot: BTreeMap<usize, usize> = BTreeMap::new();
    for p in batch {
        for i in [p.left, p.right] {
            let next = slot.len();
            slot.entry(i).or_insert(next);
        }
    }
    let mut members = vec![0; slot.len()];
    for (&i, &s) in &slot {
        members[s] = i;
    }

    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, true);
    let encoded = match enc_cfg.mode {
        EncoderMode::Trainable => encode_features(
            &mut tape,
            &bound,
            members.iter().map(|&i| bags[i].clone()).collect(),
        )?,
        EncoderMode::External => {
            let ids: Vec<&str> = members.iter().map(|&i| data[i].id.as_str()).collect();
            encode_external(&mut tape, &bound, &ids, store.expect("checked by caller"))?
        }
    };
    let xi = tape.gather_rows(encoded, batch.iter().map(|p| slot[&p.left]).collect())?;
    let xj = tape.gather_rows(encoded, batch.iter().map(|p| slot[&p.right]).collect())?;
    let labels: Vec<bool> = batch.iter().map(|p| p.positive).collect();

    let head_var = head.map(|h| tape.param(&h.weight));
    let loss = match kind {
        LossKind::Smax => smax_loss(&mut tape, xi, xj, &labels, head_var.expect("smax head"))?,
        LossKind::Cos => cos_loss(&mut tape, xi, xj, &labels, loss_cfg)?,
        LossKind::Ocl => ocl_loss(&mut tape, xi, xj, &labels, loss_cfg, loss_cfg.online)?,
    };
    let value = tape.item(loss);
    if !value.is_finite() {
        return Ok((value, BTreeMap::new()));
    }
    tape.backward(loss)?;
    let mut grads: BTreeMap<_, _> = bound
        .named()
        .into_iter()
        .filter_map(|(name, v)| tape.take_grad(v).map(|g| (name, g)))
        .collect();
    if let Some(h) = head_var {
        if let Some(g) = tape.take_grad(h) {
            grads.insert(SMAX_WEIGHT, g);
        }
    }
    Ok((value, grads))
}
