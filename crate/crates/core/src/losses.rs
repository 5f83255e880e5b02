//! Differentiable training objectives.
//!
//! * [`mneg_loss`]: multiple-negatives response ranking over a batch of
//!   `(context, response)` encodings with scaled cosine `S = D·cos`.
//! * [`smax_loss`]: binary softmax over `x_i ⊕ x_j ⊕ |x_i − x_j|`.
//! * [`cos_loss`]: squared error between cosine and a per-kind target.
//! * [`ocl_loss`]: contrastive margin loss on cosine distance, optionally
//!   restricted to the hard pairs of the batch.
//!
//! All take encodings already on a [`Tape`] and return a scalar node.

use serde::{Deserialize, Serialize};

use crate::encoder::xavier_uniform;
use crate::error::{Error, Result};
use crate::rng::{seeded, Stream};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MnegForm {
    /// Diagonal excluded from the log-sum over responses.
    Paper,
    /// Standard in-batch softmax cross-entropy (diagonal included).
    Softmax,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Smax,
    Cos,
    Ocl,
}

impl std::str::FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "smax" => Ok(Self::Smax),
            "cos" => Ok(Self::Cos),
            "ocl" => Ok(Self::Ocl),
            other => Err(Error::Config(format!(
                "unknown loss `{other}` (expected smax, cos or ocl)"
            ))),
        }
    }
}

impl std::fmt::Display for LossKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Smax => "smax",
            Self::Cos => "cos",
            Self::Ocl => "ocl",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    /// Cosine scale `D` for response ranking.
    pub scale: f64,
    /// Target cosine for positive pairs.
    pub delta_pos: f64,
    /// Target cosine for negative pairs.
    pub delta_neg: f64,
    /// Cosine-distance margin for negatives in the contrastive loss.
    pub delta_margin: f64,
    pub mneg_form: MnegForm,
    /// Restrict the contrastive loss to hard in-batch pairs.
    pub online: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            scale: 20.0,
            delta_pos: 0.8,
            delta_neg: 0.3,
            delta_margin: 0.5,
            mneg_form: MnegForm::Paper,
            online: true,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.scale > 0.0) {
            return Err(Error::Config(format!(
                "loss scale D must be positive, got {}",
                self.scale
            )));
        }
        if !(0.0 <= self.delta_neg && self.delta_neg < self.delta_pos && self.delta_pos <= 1.0) {
            return Err(Error::Config(format!(
                "cosine targets must satisfy 0 <= delta_neg < delta_pos <= 1, got {} and {}",
                self.delta_neg, self.delta_pos
            )));
        }
        if !(self.delta_margin > 0.0 && self.delta_margin <= 2.0) {
            return Err(Error::Config(format!(
                "distance margin must lie in (0, 2], got {}",
                self.delta_margin
            )));
        }
        Ok(())
    }
}

/// Response-ranking loss for `B` contexts against `B` responses, where row
/// `i` of each forms the true pair and every other response is a negative.
pub fn mneg_loss(
    tape: &mut Tape<'_>,
    contexts: Var,
    responses: Var,
    cfg: &LossConfig,
) -> Result<Var> {
    let b = match tape.shape(contexts) {
        [b, _] => *b,
        other => {
            return Err(Error::ShapeMismatch {
                op: "mneg_loss",
                left: other.to_vec(),
                right: vec![0, 0],
            })
        }
    };
    if tape.shape(responses) != tape.shape(contexts) {
        return Err(Error::ShapeMismatch {
            op: "mneg_loss",
            left: tape.shape(contexts).to_vec(),
            right: tape.shape(responses).to_vec(),
        });
    }
    if b < 2 && cfg.mneg_form == MnegForm::Paper {
        return Err(Error::EmptyInput("mneg_loss negatives (batch size < 2)"));
    }
    let cos = tape.cosine_matrix(contexts, responses)?;
    let scores = tape.scale(cos, cfg.scale);
    let diag = tape.gather(scores, (0..b).map(|i| i * b + i).collect())?;
    let positive = tape.sum(diag);
    let mask = match cfg.mneg_form {
        MnegForm::Paper => Some((0..b * b).map(|k| k / b != k % b).collect()),
        MnegForm::Softmax => None,
    };
    let lse = tape.log_sum_exp_rows(scores, mask)?;
    let normalizer = tape.sum(lse);
    tape.sub(normalizer, positive)
}

/// Weight of the train-time pair classifier, `[3·d × 2]`, no bias.
#[derive(Debug, Clone, PartialEq)]
pub struct SmaxHead {
    pub weight: Tensor,
}

impl SmaxHead {
    pub fn xavier(dim: usize, seed: u64) -> Self {
        Self {
            weight: xavier_uniform(3 * dim, 2, &mut seeded(seed, Stream::SmaxHeadInit)),
        }
    }

    pub fn zeros(dim: usize) -> Self {
        Self {
            weight: Tensor::zeros(&[3 * dim, 2]),
        }
    }
}

fn pair_shapes(
    tape: &Tape<'_>,
    op: &'static str,
    xi: Var,
    xj: Var,
    labels: &[bool],
) -> Result<(usize, usize)> {
    let (p, d) = match tape.shape(xi) {
        [p, d] => (*p, *d),
        other => {
            return Err(Error::ShapeMismatch {
                op,
                left: other.to_vec(),
                right: vec![0, 0],
            })
        }
    };
    if tape.shape(xj) != [p, d] {
        return Err(Error::ShapeMismatch {
            op,
            left: tape.shape(xi).to_vec(),
            right: tape.shape(xj).to_vec(),
        });
    }
    if labels.len() != p {
        return Err(Error::ShapeMismatch {
            op,
            left: vec![p],
            right: vec![labels.len()],
        });
    }
    Ok((p, d))
}

/// Mean cross-entropy of `(x_i ⊕ x_j ⊕ |x_i − x_j|)·W` against the pair
/// kind (class 1 = positive).
pub fn smax_loss(
    tape: &mut Tape<'_>,
    xi: Var,
    xj: Var,
    is_positive: &[bool],
    head: Var,
) -> Result<Var> {
    let (_, d) = pair_shapes(tape, "smax_loss", xi, xj, is_positive)?;
    if tape.shape(head) != [3 * d, 2] {
        return Err(Error::ShapeMismatch {
            op: "smax_loss head",
            left: vec![3 * d, 2],
            right: tape.shape(head).to_vec(),
        });
    }
    let diff = tape.sub(xi, xj)?;
    let diff = tape.abs(diff);
    let features = tape.concat(&[xi, xj, diff], 1)?;
    let logits = tape.matmul(features, head)?;
    let lse = tape.log_sum_exp_rows(logits, None)?;
    let target_idx = is_positive
        .iter()
        .enumerate()
        .map(|(i, &pos)| 2 * i + pos as usize)
        .collect();
    let target = tape.gather(logits, target_idx)?;
    let ce = tape.sub(lse, target)?;
    Ok(tape.mean(ce))
}

/// Mean of `(δ − cos(x_i, x_j))²` with `δ` chosen by pair kind.
pub fn cos_loss(
    tape: &mut Tape<'_>,
    xi: Var,
    xj: Var,
    is_positive: &[bool],
    cfg: &LossConfig,
) -> Result<Var> {
    pair_shapes(tape, "cos_loss", xi, xj, is_positive)?;
    let cos = tape.cosine_rows(xi, xj)?;
    let targets: Vec<f64> = is_positive
        .iter()
        .map(|&pos| if pos { cfg.delta_pos } else { cfg.delta_neg })
        .collect();
    let targets = tape.leaf(Tensor::vector(targets)?, false);
    let diff = tape.sub(targets, cos)?;
    let sq = tape.square(diff);
    Ok(tape.mean(sq))
}

/// Hard-pair selection: negatives closer than the farthest positive and
/// positives farther than the closest negative. A batch with only one kind
/// keeps all of it.
pub fn hard_pair_mask(dcos: &[f64], is_positive: &[bool]) -> Vec<bool> {
    let max_pos = dcos
        .iter()
        .zip(is_positive)
        .filter(|(_, &p)| p)
        .map(|(&d, _)| d)
        .fold(None, |m: Option<f64>, d| Some(m.map_or(d, |m| m.max(d))));
    let min_neg = dcos
        .iter()
        .zip(is_positive)
        .filter(|(_, &p)| !p)
        .map(|(&d, _)| d)
        .fold(None, |m: Option<f64>, d| Some(m.map_or(d, |m| m.min(d))));
    dcos.iter()
        .zip(is_positive)
        .map(|(&d, &pos)| match (pos, max_pos, min_neg) {
            (true, _, None) | (false, None, _) => true,
            (true, _, Some(min_neg)) => d > min_neg,
            (false, Some(max_pos), _) => d < max_pos,
        })
        .collect()
}

/// Sum over (kept) pairs of `dcos²` for positives and
/// `relu(δ_m − dcos)²` for negatives, with `dcos = 1 − cos`.
pub fn ocl_loss(
    tape: &mut Tape<'_>,
    xi: Var,
    xj: Var,
    is_positive: &[bool],
    cfg: &LossConfig,
    online: bool,
) -> Result<Var> {
    pair_shapes(tape, "ocl_loss", xi, xj, is_positive)?;
    let cos = tape.cosine_rows(xi, xj)?;
    let one = tape.leaf(Tensor::scalar(1.0), false);
    let dcos = tape.sub(one, cos)?;
    let keep = if online {
        hard_pair_mask(tape.value(dcos), is_positive)
    } else {
        vec![true; is_positive.len()]
    };
    let pos_idx: Vec<usize> = (0..keep.len())
        .filter(|&i| keep[i] && is_positive[i])
        .collect();
    let neg_idx: Vec<usize> = (0..keep.len())
        .filter(|&i| keep[i] && !is_positive[i])
        .collect();

    let mut parts = Vec::new();
    if !pos_idx.is_empty() {
        let d = tape.gather(dcos, pos_idx)?;
        let sq = tape.square(d);
        parts.push(tape.sum(sq));
    }
    if !neg_idx.is_empty() {
        let d = tape.gather(dcos, neg_idx)?;
        let margin = tape.leaf(Tensor::scalar(cfg.delta_margin), false);
        let gap = tape.sub(margin, d)?;
        let gap = tape.relu(gap);
        let sq = tape.square(gap);
        parts.push(tape.sum(sq));
    }
    Ok(match parts[..] {
        [] => tape.leaf(Tensor::scalar(0.0), false),
        [only] => only,
        [a, b] => tape.add(a, b)?,
        _ => unreachable!(),
    })
}
