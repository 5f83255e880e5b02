//! Feature-based baseline: an MLP classifier over frozen sentence vectors.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, StoredTensor, TrainingMetadata};
use crate::encoder::{xavier_uniform, EncoderConfig};
use crate::error::{Error, Result};
use crate::rng::{seeded, Stream};
use crate::tensor::{Tape, Tensor, Var};

pub const MLP_STAGE: &str = "mlp-baseline";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MlpConfig {
    pub hidden_dims: [usize; 2],
    pub dropout: f64,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for MlpConfig {
    fn default() -> Self {
        Self {
            hidden_dims: [64, 64],
            dropout: 0.75,
            lr: 0.5,
            epochs: 100,
            batch_size: 32,
            seed: 1,
        }
    }
}

impl MlpConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "dropout must lie in [0, 1), got {}",
                self.dropout
            )));
        }
        if self.hidden_dims.contains(&0) {
            return Err(Error::Config("hidden widths must be at least 1".into()));
        }
        if !(self.lr > 0.0) || self.batch_size == 0 {
            return Err(Error::Config(
                "mlp lr must be positive and batch_size at least 1".into(),
            ));
        }
        Ok(())
    }
}

/// Three affine layers; `labels[c]` names output column `c`.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    pub weights: [Tensor; 3],
    pub biases: [Tensor; 3],
    pub labels: Vec<String>,
}

impl MlpParams {
    pub fn input_dim(&self) -> usize {
        self.weights[0].rows()
    }

    fn init(input_dim: usize, cfg: &MlpConfig, labels: Vec<String>, rng: &mut impl Rng) -> Self {
        let dims = [
            input_dim,
            cfg.hidden_dims[0],
            cfg.hidden_dims[1],
            labels.len(),
        ];
        let weights = [0, 1, 2].map(|l| xavier_uniform(dims[l], dims[l + 1], rng));
        let biases = [0, 1, 2].map(|l| Tensor::zeros(&[dims[l + 1]]));
        Self {
            weights,
            biases,
            labels,
        }
    }

    fn tensor_names() -> [(String, String); 3] {
        [0, 1, 2].map(|l| (format!("mlp.w{l}"), format!("mlp.b{l}")))
    }

    /// Stores the classifier in the checkpoint container. `enc_cfg` records
    /// the encoder whose vectors the classifier consumes.
    pub fn to_checkpoint(&self, enc_cfg: &EncoderConfig, cfg: &MlpConfig) -> Checkpoint {
        let mut tensors = BTreeMap::new();
        for (l, (w, b)) in Self::tensor_names().into_iter().enumerate() {
            tensors.insert(w, StoredTensor::from_tensor(&self.weights[l]));
            tensors.insert(b, StoredTensor::from_tensor(&self.biases[l]));
        }
        let mut extra = BTreeMap::new();
        extra.insert(
            "mlp_config".to_string(),
            serde_json::to_value(cfg).expect("config serializes"),
        );
        Checkpoint {
            encoder_config: enc_cfg.clone(),
            tensors,
            optimizer: None,
            metadata: TrainingMetadata {
                stage: MLP_STAGE.into(),
                epochs_completed: cfg.epochs,
                seed: cfg.seed,
                labels: self.labels.clone(),
                extra,
                ..TrainingMetadata::default()
            },
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.metadata.stage != MLP_STAGE {
            return Err(Error::MalformedCheckpoint(format!(
                "expected stage `{MLP_STAGE}`, found `{}`",
                ck.metadata.stage
            )));
        }
        let names = Self::tensor_names();
        let weights = [0, 1, 2].map(|l| ck.tensor(&names[l].0));
        let biases = [0, 1, 2].map(|l| ck.tensor(&names[l].1));
        let [w0, w1, w2] = weights;
        let [b0, b1, b2] = biases;
        let p = Self {
            weights: [w0?, w1?, w2?],
            biases: [b0?, b1?, b2?],
            labels: ck.metadata.labels.clone(),
        };
        if p.weights[2].cols() != p.labels.len() {
            return Err(Error::MalformedCheckpoint(
                "output width differs from label count".into(),
            ));
        }
        Ok(p)
    }
}

/// Logits for `x` through the network; `masks` holds one dropout
/// multiplier tensor per hidden layer, or none at inference.
fn forward(
    tape: &mut Tape<'_>,
    x: Var,
    layers: &[(Var, Var); 3],
    masks: Option<[Var; 2]>,
) -> Result<Var> {
    let mut h = x;
    for (l, &(w, b)) in layers.iter().enumerate() {
        h = tape.matmul(h, w)?;
        h = tape.add_row(h, b)?;
        if l < 2 {
            h = tape.relu(h);
            if let Some(m) = masks {
                h = tape.mul(h, m[l])?;
            }
        }
    }
    Ok(h)
}

/// Trains on frozen `embeddings` with plain SGD, the learning rate decaying
/// linearly from `cfg.lr` to 0.
pub fn train_mlp<S: AsRef<str>>(
    embeddings: &Tensor,
    labels: &[S],
    cfg: &MlpConfig,
) -> Result<MlpParams> {
    cfg.validate()?;
    if embeddings.shape().len() != 2 || embeddings.rows() != labels.len() {
        return Err(Error::ShapeMismatch {
            op: "train_mlp",
            left: embeddings.shape().to_vec(),
            right: vec![labels.len()],
        });
    }
    let mut classes: Vec<String> = labels.iter().map(|l| l.as_ref().to_string()).collect();
    classes.sort();
    classes.dedup();
    if classes.len() < 2 {
        return Err(Error::Config(
            "mlp baseline needs at least 2 classes".into(),
        ));
    }
    let targets: Vec<usize> = labels
        .iter()
        .map(|l| {
            classes
                .binary_search_by(|c| c.as_str().cmp(l.as_ref()))
                .expect("label present")
        })
        .collect();

    let mut rng = seeded(cfg.seed, Stream::Mlp);
    let mut params = MlpParams::init(embeddings.cols(), cfg, classes, &mut rng);
    let n = labels.len();
    let per_epoch = n.div_ceil(cfg.batch_size);
    let total = (cfg.epochs * per_epoch).max(1);
    let keep = 1.0 - cfg.dropout;
    let d = embeddings.cols();
    let mut step = 0;

    for _ in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let rows: Vec<f64> = batch
                .iter()
                .flat_map(|&i| embeddings.row(i).iter().copied())
                .collect();
            let x = Tensor::matrix(batch.len(), d, rows)?;
            let masks: [Tensor; 2] = [0, 1].map(|l| {
                let width = cfg.hidden_dims[l];
                let data = (0..batch.len() * width)
                    .map(|_| {
                        if cfg.dropout == 0.0 || rng.random::<f64>() < keep {
                            1.0 / keep
                        } else {
                            0.0
                        }
                    })
                    .collect();
                Tensor::matrix(batch.len(), width, data).expect("mask shape")
            });

            let grads = {
                let mut tape = Tape::new();
                let xv = tape.leaf(x, false);
                let layers = [0, 1, 2].map(|l| {
                    (
                        tape.param(&params.weights[l]),
                        tape.param(&params.biases[l]),
                    )
                });
                let mv = [tape.constant(&masks[0]), tape.constant(&masks[1])];
                let logits = forward(&mut tape, xv, &layers, Some(mv))?;
                let lse = tape.log_sum_exp_rows(logits, None)?;
                let c = params.labels.len();
                let target = tape.gather(
                    logits,
                    batch
                        .iter()
                        .enumerate()
                        .map(|(r, &i)| r * c + targets[i])
                        .collect(),
                )?;
                let ce = tape.sub(lse, target)?;
                let loss = tape.mean(ce);
                if !tape.item(loss).is_finite() {
                    return Err(Error::NonFiniteLoss(step));
                }
                tape.backward(loss)?;
                layers.map(|(w, b)| (tape.take_grad(w), tape.take_grad(b)))
            };

            let lr_t = cfg.lr * (total - step) as f64 / total as f64;
            for (l, (gw, gb)) in grads.into_iter().enumerate() {
                for (t, g) in [(&mut params.weights[l], gw), (&mut params.biases[l], gb)] {
                    if let Some(g) = g {
                        for (p, g) in t.data_mut().iter_mut().zip(g) {
                            *p -= lr_t * g;
                        }
                    }
                }
            }
            step += 1;
        }
    }
    Ok(params)
}

/// Logits per row with dropout off.
pub fn mlp_logits(embeddings: &Tensor, params: &MlpParams) -> Result<Tensor> {
    if embeddings.shape().len() != 2 || embeddings.cols() != params.input_dim() {
        return Err(Error::ShapeMismatch {
            op: "mlp_predict",
            left: vec![params.input_dim()],
            right: embeddings.shape().to_vec(),
        });
    }
    let mut tape = Tape::new();
    let x = tape.constant(embeddings);
    let layers = [0, 1, 2].map(|l| {
        (
            tape.constant(&params.weights[l]),
            tape.constant(&params.biases[l]),
        )
    });
    let logits = forward(&mut tape, x, &layers, None)?;
    Ok(tape.tensor(logits))
}

/// Argmax label per row; equal logits go to the lowest class index.
pub fn mlp_predict(embeddings: &Tensor, params: &MlpParams) -> Result<Vec<String>> {
    let logits = mlp_logits(embeddings, params)?;
    Ok((0..logits.rows())
        .map(|i| {
            let row = logits.row(i);
            let mut best = 0;
            for (c, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = c;
                }
            }
            params.labels[best].clone()
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::StandardNormal;

    /// Two Gaussian blobs with spread `0.1`, centers `sep`
    /// standard deviations apart along every axis.
    fn blobs(per: usize, d: usize, sep: f64, seed: u64) -> (Tensor, Vec<String>) {
        let sigma = 0.1;
        let mut rng = seeded(seed, Stream::Synthetic);
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for c in 0..2 {
            for _ in 0..per {
                let center = if c == 0 {
                    -sep * sigma / 2.0
                } else {
                    sep * sigma / 2.0
                };
                rows.push(
                    (0..d)
                        .map(|_| center + sigma * rng.sample::<f64, _>(StandardNormal))
                        .collect::<Vec<_>>(),
                );
                labels.push(format!("c{c}"));
            }
        }
        (Tensor::from_rows(&rows).unwrap(), labels)
    }

    #[test]
    fn separable_blobs_are_learned() {
        let (x, y) = blobs(50, 4, 10.0, 3);
        let cfg = MlpConfig {
            epochs: 30,
            ..MlpConfig::default()
        };
        let p = train_mlp(&x, &y, &cfg).unwrap();
        let pred = mlp_predict(&x, &p).unwrap();
        assert!(crate::metrics::accuracy(&pred, &y).unwrap() >= 0.98);
    }

    #[test]
    fn embeddings_untouched_and_deterministic() {
        let (x, y) = blobs(10, 4, 4.0, 1);
        let before = x.clone();
        let cfg = MlpConfig {
            epochs: 5,
            ..MlpConfig::default()
        };
        let a = train_mlp(&x, &y, &cfg).unwrap();
        let b = train_mlp(&x, &y, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(x, before);
        assert_eq!(mlp_predict(&x, &a).unwrap(), mlp_predict(&x, &a).unwrap());
    }

    /// Forward pass and mean cross-entropy written out with plain loops.
    fn reference_loss(p: &MlpParams, x: &Tensor, targets: &[usize]) -> f64 {
        let mut total = 0.0;
        for i in 0..x.rows() {
            let mut h: Vec<f64> = x.row(i).to_vec();
            for l in 0..3 {
                let w = &p.weights[l];
                let mut out = p.biases[l].data().to_vec();
                for (r, hv) in h.iter().enumerate() {
                    for c in 0..w.cols() {
                        out[c] += hv * w.data()[r * w.cols() + c];
                    }
                }
                if l < 2 {
                    out.iter_mut().for_each(|v| *v = v.max(0.0));
                }
                h = out;
            }
            let m = h.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + h.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            total += lse - h[targets[i]];
        }
        total / x.rows() as f64
    }

    #[test]
    fn first_step_without_dropout_is_plain_sgd() {
        let (x, y) = blobs(3, 3, 2.0, 5);
        let cfg = MlpConfig {
            hidden_dims: [5, 4],
            dropout: 0.0,
            lr: 0.1,
            epochs: 1,
            batch_size: 6,
            seed: 9,
        };
        let trained = train_mlp(&x, &y, &cfg).unwrap();
        let mut rng = seeded(cfg.seed, Stream::Mlp);
        let init = MlpParams::init(3, &cfg, vec!["c0".into(), "c1".into()], &mut rng);
        let targets: Vec<usize> = y.iter().map(|l| (l == "c1") as usize).collect();
        let h = 1e-6;
        for l in 0..3 {
            for k in 0..init.weights[l].len() {
                let mut plus = init.clone();
                plus.weights[l].data_mut()[k] += h;
                let mut minus = init.clone();
                minus.weights[l].data_mut()[k] -= h;
                let g = (reference_loss(&plus, &x, &targets)
                    - reference_loss(&minus, &x, &targets))
                    / (2.0 * h);
                let want = init.weights[l].data()[k] - cfg.lr * g;
                assert!((trained.weights[l].data()[k] - want).abs() < 1e-7);
            }
        }
    }

    #[test]
    fn argmax_ties_and_duplicates() {
        let p = MlpParams {
            weights: [
                Tensor::matrix(1, 1, vec![1.0]).unwrap(),
                Tensor::matrix(1, 1, vec![1.0]).unwrap(),
                Tensor::matrix(1, 3, vec![0.0, 0.0, 0.0]).unwrap(),
            ],
            biases: [
                Tensor::zeros(&[1]),
                Tensor::zeros(&[1]),
                Tensor::zeros(&[3]),
            ],
            labels: vec!["a".into(), "b".into(), "c".into()],
        };
        let x = Tensor::matrix(4, 1, vec![0.5; 4]).unwrap();
        assert_eq!(mlp_predict(&x, &p).unwrap(), vec!["a"; 4]);
        assert!(mlp_predict(&Tensor::matrix(1, 2, vec![1.0, 1.0]).unwrap(), &p).is_err());
    }

    #[test]
    fn errors_and_checkpoint_round_trip() {
        let (x, _) = blobs(2, 2, 1.0, 1);
        assert!(train_mlp(&x, &["a"; 4], &MlpConfig::default()).is_err());
        let bad = MlpConfig {
            dropout: 1.0,
            ..MlpConfig::default()
        };
        assert!(train_mlp(&x, &["a", "a", "b", "b"], &bad).is_err());

        let cfg = MlpConfig {
            epochs: 2,
            ..MlpConfig::default()
        };
        let p = train_mlp(&x, &["a", "a", "b", "b"], &cfg).unwrap();
        let ck = p.to_checkpoint(&EncoderConfig::default(), &cfg);
        let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
        assert_eq!(back.metadata.stage, MLP_STAGE);
        let q = MlpParams::from_checkpoint(&back).unwrap();
        assert_eq!(q.labels, p.labels);
        assert_eq!(mlp_predict(&x, &q).unwrap(), mlp_predict(&x, &p).unwrap());
    }
}
