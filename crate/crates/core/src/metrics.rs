//! Accuracy, silhouette coefficient and multi-run aggregation.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub fn accuracy<S: AsRef<str>, T: AsRef<str>>(predictions: &[S], gold: &[T]) -> Result<f64> {
    if predictions.len() != gold.len() {
        return Err(Error::ShapeMismatch {
            op: "accuracy",
            left: vec![predictions.len()],
            right: vec![gold.len()],
        });
    }
    if gold.is_empty() {
        return Err(Error::EmptyInput("accuracy"));
    }
    let correct = predictions
        .iter()
        .zip(gold)
        .filter(|(p, g)| p.as_ref() == g.as_ref())
        .count();
    Ok(correct as f64 / gold.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Distance {
    #[default]
    Cosine,
    Euclidean,
}

impl fmt::Display for Distance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Distance::Cosine => "cosine",
            Distance::Euclidean => "euclidean",
        })
    }
}

impl FromStr for Distance {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cosine" => Ok(Distance::Cosine),
            "euclidean" => Ok(Distance::Euclidean),
            other => Err(Error::Config(format!("unknown distance `{other}`"))),
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Mean silhouette coefficient. Points alone in their class score 0.
pub fn silhouette<S: AsRef<str> + Sync>(
    vectors: &Tensor,
    labels: &[S],
    distance: Distance,
) -> Result<f64> {
    if vectors.shape().len() != 2 || vectors.rows() != labels.len() {
        return Err(Error::ShapeMismatch {
            op: "silhouette",
            left: vectors.shape().to_vec(),
            right: vec![labels.len()],
        });
    }
    let m = labels.len();
    if m < 2 {
        return Err(Error::EmptyInput("silhouette (needs at least 2 points)"));
    }
    let mut class_of: BTreeMap<&str, usize> = BTreeMap::new();
    for l in labels {
        let next = class_of.len();
        class_of.entry(l.as_ref()).or_insert(next);
    }
    let n_classes = class_of.len();
    if n_classes < 2 {
        return Err(Error::Config(
            "silhouette needs at least 2 distinct labels".into(),
        ));
    }
    let cls: Vec<usize> = labels.iter().map(|l| class_of[l.as_ref()]).collect();
    let mut sizes = vec![0usize; n_classes];
    for &c in &cls {
        sizes[c] += 1;
    }
    let norms: Vec<f64> = (0..m)
        .map(|i| dot(vectors.row(i), vectors.row(i)).sqrt())
        .collect();
    if distance == Distance::Cosine && norms.contains(&0.0) {
        return Err(Error::DegenerateVector("silhouette"));
    }
    let dist = |i: usize, j: usize| -> f64 {
        let (a, b) = (vectors.row(i), vectors.row(j));
        match distance {
            Distance::Cosine => 1.0 - (dot(a, b) / (norms[i] * norms[j])).clamp(-1.0, 1.0),
            Distance::Euclidean => a
                .iter()
                .zip(b)
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
                .sqrt(),
        }
    };

    let scores: Vec<f64> = (0..m)
        .into_par_iter()
        .map(|i| {
            let own = cls[i];
            if sizes[own] == 1 {
                return 0.0;
            }
            let mut sums = vec![0.0; n_classes];
            for j in 0..m {
                if j != i {
                    sums[cls[j]] += dist(i, j);
                }
            }
            let a = sums[own] / (sizes[own] - 1) as f64;
            let b = (0..n_classes)
                .filter(|&c| c != own)
                .map(|c| sums[c] / sizes[c] as f64)
                .fold(f64::INFINITY, f64::min);
            let denom = a.max(b);
            if denom == 0.0 {
                0.0
            } else {
                (b - a) / denom
            }
        })
        .collect();
    Ok(scores.iter().sum::<f64>() / m as f64)
}

/// Accuracy summary for one run, or the aggregate of several.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    pub per_class: BTreeMap<String, f64>,
    pub n: usize,
    pub seeds: Vec<u64>,
    pub mean: f64,
    pub std: f64,
    pub distance_metric: Distance,
    /// Per-run accuracies in seed order.
    pub runs: Vec<f64>,
    #[serde(default)]
    pub silhouette: Option<f64>,
}

impl EvalReport {
    /// Report for a single run. Classes are those of `gold`.
    pub fn from_predictions<S: AsRef<str>, T: AsRef<str>>(
        predictions: &[S],
        gold: &[T],
        seed: u64,
        distance_metric: Distance,
        silhouette: Option<f64>,
    ) -> Result<Self> {
        let acc = accuracy(predictions, gold)?;
        let mut counts: BTreeMap<String, (usize, usize)> = BTreeMap::new();
        for (p, g) in predictions.iter().zip(gold) {
            let e = counts.entry(g.as_ref().to_string()).or_default();
            e.1 += 1;
            if p.as_ref() == g.as_ref() {
                e.0 += 1;
            }
        }
        let per_class = counts
            .into_iter()
            .map(|(k, (c, t))| (k, c as f64 / t as f64))
            .collect();
        Ok(Self {
            accuracy: acc,
            per_class,
            n: gold.len(),
            seeds: vec![seed],
            mean: acc,
            std: 0.0,
            distance_metric,
            runs: vec![acc],
            silhouette,
        })
    }
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Mean and sample standard deviation over runs. `n` is the total number of
/// examples evaluated.
pub fn evaluate_runs(reports: &[EvalReport]) -> Result<EvalReport> {
    let first = reports.first().ok_or(Error::EmptyInput("evaluate_runs"))?;
    for r in &reports[1..] {
        if r.per_class.keys().ne(first.per_class.keys()) {
            return Err(Error::Config(
                "runs were evaluated on different class sets".into(),
            ));
        }
        if r.distance_metric != first.distance_metric {
            return Err(Error::Config(
                "runs use different silhouette distances".into(),
            ));
        }
    }
    let runs: Vec<f64> = reports
        .iter()
        .flat_map(|r| r.runs.iter().copied())
        .collect();
    let (mean, std) = mean_std(&runs);
    let per_class = first
        .per_class
        .keys()
        .map(|k| {
            let v: Vec<f64> = reports.iter().map(|r| r.per_class[k]).collect();
            (k.clone(), mean_std(&v).0)
        })
        .collect();
    let sils: Vec<f64> = reports.iter().filter_map(|r| r.silhouette).collect();
    let silhouette = (sils.len() == reports.len()).then(|| mean_std(&sils).0);
    Ok(EvalReport {
        accuracy: mean,
        per_class,
        n: reports.iter().map(|r| r.n).sum(),
        seeds: reports
            .iter()
            .flat_map(|r| r.seeds.iter().copied())
            .collect(),
        mean,
        std,
        distance_metric: first.distance_metric,
        runs,
        silhouette,
    })
}
