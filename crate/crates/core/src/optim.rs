//! AdamW with decoupled weight decay and a linear warmup/decay schedule.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimConfig {
    pub lr: f64,
    pub warmup_fraction: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 2e-5,
            warmup_fraction: 0.1,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            epochs: 1,
            batch_size: 32,
            seed: 1,
        }
    }
}

impl OptimConfig {
    /// Checks ranges. Zero epochs is accepted and means "no updates".
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("optimizer: {m}")));
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return bad(format!(
                "warmup_fraction must lie in [0, 1), got {}",
                self.warmup_fraction
            ));
        }
        if self.weight_decay < 0.0 {
            return bad(format!(
                "weight_decay must be non-negative, got {}",
                self.weight_decay
            ));
        }
        if !(0.0..1.0).contains(&self.beta1)
            || !(0.0..1.0).contains(&self.beta2)
            || !(self.eps > 0.0)
        {
            return bad("beta1, beta2 must lie in [0, 1) and eps must be positive".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        Ok(())
    }

    pub fn warmup_steps(&self, total_steps: usize) -> usize {
        (self.warmup_fraction * total_steps as f64).ceil() as usize
    }
}

/// Learning rate at `step` of `total_steps`: linear ramp from 0 to `lr`
/// over the warmup steps, then linear decay to 0 at `total_steps`.
pub fn lr_at(step: usize, total_steps: usize, cfg: &OptimConfig) -> Result<f64> {
    if total_steps == 0 || step > total_steps {
        return Err(Error::Config(format!(
            "schedule step {step} out of range for {total_steps} total steps"
        )));
    }
    let warmup = cfg.warmup_steps(total_steps);
    if step == total_steps {
        return Ok(0.0);
    }
    if step < warmup {
        return Ok(cfg.lr * step as f64 / warmup as f64);
    }
    Ok(cfg.lr * (total_steps - step) as f64 / (total_steps - warmup) as f64)
}

/// First and second moment estimates keyed by parameter name.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub first: BTreeMap<String, Vec<f64>>,
    pub second: BTreeMap<String, Vec<f64>>,
}

/// A parameter with its gradient for one optimizer step. A missing
/// gradient counts as zero.
pub struct ParamUpdate<'p, 'g> {
    pub name: &'p str,
    pub value: &'p mut Tensor,
    pub grad: Option<&'g [f64]>,
}

const CHUNK: usize = 1 << 14;

/// One AdamW step on every parameter in `params`.
///
/// Weight decay is applied to the parameter before the bias-corrected Adam
/// update. All gradients are checked for shape and finiteness before any
/// parameter changes.
pub fn adamw_step(
    params: &mut [ParamUpdate<'_, '_>],
    state: &mut AdamState,
    lr_t: f64,
    cfg: &OptimConfig,
) -> Result<()> {
    if !(lr_t >= 0.0) {
        return Err(Error::Config(format!(
            "learning rate must be non-negative, got {lr_t}"
        )));
    }
    for p in params.iter() {
        if let Some(g) = p.grad {
            if g.len() != p.value.len() {
                return Err(Error::ShapeMismatch {
                    op: "adamw_step",
                    left: p.value.shape().to_vec(),
                    right: vec![g.len()],
                });
            }
            if let Some(index) = g.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFiniteGradient {
                    name: p.name.to_string(),
                    index,
                });
            }
        }
        for moments in [&state.first, &state.second] {
            if let Some(m) = moments.get(p.name) {
                if m.len() != p.value.len() {
                    return Err(Error::ShapeMismatch {
                        op: "adamw_step state",
                        left: p.value.shape().to_vec(),
                        right: vec![m.len()],
                    });
                }
            }
        }
    }

    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2_sqrt = (1.0 - cfg.beta2.powi(t)).sqrt();
    let step_size = lr_t / bc1;
    let decay = 1.0 - lr_t * cfg.weight_decay;
    let (b1, b2, eps) = (cfg.beta1, cfg.beta2, cfg.eps);

    for p in params.iter_mut() {
        let n = p.value.len();
        let m = state
            .first
            .entry(p.name.to_string())
            .or_insert_with(|| vec![0.0; n]);
        let v = state
            .second
            .entry(p.name.to_string())
            .or_insert_with(|| vec![0.0; n]);
        let update =
            |(((pc, mc), vc), gc): (((&mut [f64], &mut [f64]), &mut [f64]), Option<&[f64]>)| {
                for k in 0..pc.len() {
                    let g = gc.map_or(0.0, |g| g[k]);
                    pc[k] *= decay;
                    mc[k] = b1 * mc[k] + (1.0 - b1) * g;
                    vc[k] = b2 * vc[k] + (1.0 - b2) * g * g;
                    let denom = vc[k].sqrt() / bc2_sqrt + eps;
                    pc[k] -= step_size * mc[k] / denom;
                }
            };
        let chunks = p
            .value
            .data_mut()
            .par_chunks_mut(CHUNK)
            .zip(m.par_chunks_mut(CHUNK))
            .zip(v.par_chunks_mut(CHUNK));
        match p.grad {
            Some(g) => chunks.zip(g.par_chunks(CHUNK).map(Some)).for_each(update),
            None => chunks.map(|x| (x, None)).for_each(update),
        }
    }
    Ok(())
}
