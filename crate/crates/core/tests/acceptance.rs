//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each,
//! and exits nonzero if any failed.

#![allow(clippy::needless_range_loop)]

use std::collections::BTreeSet;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use convfit::checkpoint::Checkpoint;
use convfit::inference::classify_vector;
use convfit::losses::{cos_loss, hard_pair_mask, mneg_loss, ocl_loss, smax_loss};
use convfit::pairing::build_pairs;
use convfit::pipeline::{
    augment_probe, run_pipeline_on, write_outputs, Classifier, ExperimentData,
};
use convfit::tensor::finite_difference_check;
use convfit::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    passed: bool,
    detail: String,
}

fn check(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        passed,
        detail: detail.into(),
    }
}

fn random_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::matrix(
        rows,
        cols,
        (0..rows * cols)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect(),
    )
    .unwrap()
}

fn random_kinds(rng: &mut ChaCha8Rng, p: usize) -> Vec<bool> {
    let mut kinds: Vec<bool> = (0..p).map(|_| rng.random_bool(0.4)).collect();
    kinds[0] = true;
    if p > 1 {
        kinds[p - 1] = false;
    }
    kinds
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn cos(a: &[f64], b: &[f64]) -> f64 {
    dot(a, b) / (dot(a, a).sqrt() * dot(b, b).sqrt())
}

fn gradient_suite() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let cfg = LossConfig::default();
    let mut worst: Vec<(&str, f64)> = Vec::new();
    let names = [
        "mneg-paper",
        "mneg-softmax",
        "smax",
        "cos",
        "ocl",
        "ocl-online",
    ];
    for name in names {
        let mut max_err = 0.0f64;
        for _ in 0..50 {
            let b = rng.random_range(2..=5);
            let d = rng.random_range(2..=4);
            let x = random_tensor(&mut rng, b, d);
            let y = random_tensor(&mut rng, b, d);
            let kinds = random_kinds(&mut rng, b);
            let head = random_tensor(&mut rng, 3 * d, 2);
            let err = match name {
                "mneg-paper" | "mneg-softmax" => {
                    // The full softmax saturates at the default scale and its
                    // gradients drop below central-difference resolution.
                    let (form, scale) = if name == "mneg-paper" {
                        (MnegForm::Paper, cfg.scale)
                    } else {
                        (MnegForm::Softmax, rng.random_range(1.0..5.0))
                    };
                    let c = LossConfig {
                        mneg_form: form,
                        scale,
                        ..cfg.clone()
                    };
                    finite_difference_check(|t, v| mneg_loss(t, v[0], v[1], &c), &[x, y], 1e-6)
                }
                "smax" => finite_difference_check(
                    |t, v| smax_loss(t, v[0], v[1], &kinds, v[2]),
                    &[x, y, head],
                    1e-6,
                ),
                "cos" => finite_difference_check(
                    |t, v| cos_loss(t, v[0], v[1], &kinds, &cfg),
                    &[x, y],
                    1e-6,
                ),
                _ => {
                    let online = name == "ocl-online";
                    finite_difference_check(
                        |t, v| ocl_loss(t, v[0], v[1], &kinds, &cfg, online),
                        &[x, y],
                        1e-6,
                    )
                }
            }
            .unwrap();
            max_err = max_err.max(err);
        }
        worst.push((name, max_err));
    }
    let overall = worst.iter().map(|w| w.1).fold(0.0, f64::max);
    let per: Vec<String> = worst.iter().map(|(n, e)| format!("{n} {e:.1e}")).collect();
    check(
        overall < 1e-4,
        format!("max rel-err {} over 50 configs each", per.join(", ")),
    )
}

fn brute_mneg(c: &Tensor, r: &Tensor, cfg: &LossConfig) -> f64 {
    let b = c.rows();
    let mut total = 0.0;
    for i in 0..b {
        let mut z = 0.0;
        for j in 0..b {
            if cfg.mneg_form == MnegForm::Paper && i == j {
                continue;
            }
            z += (cfg.scale * cos(c.row(i), r.row(j))).exp();
        }
        total += z.ln() - cfg.scale * cos(c.row(i), r.row(i));
    }
    total
}

fn brute_smax(x: &Tensor, y: &Tensor, kinds: &[bool], w: &Tensor) -> f64 {
    let d = x.cols();
    let mut total = 0.0;
    for p in 0..kinds.len() {
        let mut feats = x.row(p).to_vec();
        feats.extend_from_slice(y.row(p));
        feats.extend(x.row(p).iter().zip(y.row(p)).map(|(a, b)| (a - b).abs()));
        let logit = |k: usize| {
            (0..3 * d)
                .map(|f| feats[f] * w.data()[f * 2 + k])
                .sum::<f64>()
        };
        let (l0, l1) = (logit(0), logit(1));
        let target = if kinds[p] { l1 } else { l0 };
        total += (l0.exp() + l1.exp()).ln() - target;
    }
    total / kinds.len() as f64
}

/// Hard pairs straight from the definition: a positive is hard if some
/// negative is closer, a negative is hard if some positive is farther.
fn brute_hard(dcos: &[f64], kinds: &[bool]) -> Vec<bool> {
    let any_neg = kinds.iter().any(|k| !k);
    let any_pos = kinds.iter().any(|k| *k);
    (0..kinds.len())
        .map(|i| {
            if kinds[i] {
                !any_neg || (0..kinds.len()).any(|j| !kinds[j] && dcos[j] < dcos[i])
            } else {
                !any_pos || (0..kinds.len()).any(|j| kinds[j] && dcos[j] > dcos[i])
            }
        })
        .collect()
}

fn loss_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let cfg = LossConfig::default();
    let mut worst = 0.0f64;
    let mut mask_mismatch = 0;
    for trial in 0..200 {
        let b = rng.random_range(2..=8);
        let d = rng.random_range(2..=6);
        let x = random_tensor(&mut rng, b, d);
        let y = random_tensor(&mut rng, b, d);
        let kinds = if trial % 10 == 0 {
            vec![true; b]
        } else {
            random_kinds(&mut rng, b)
        };
        let w = random_tensor(&mut rng, 3 * d, 2);
        let mut tape = Tape::new();
        let xv = tape.param(&x);
        let yv = tape.param(&y);
        let wv = tape.param(&w);

        for form in [MnegForm::Paper, MnegForm::Softmax] {
            let c = LossConfig {
                mneg_form: form,
                ..cfg.clone()
            };
            let l = mneg_loss(&mut tape, xv, yv, &c).unwrap();
            let got = tape.item(l);
            worst = worst.max((got - brute_mneg(&x, &y, &c)).abs());
        }
        let l = smax_loss(&mut tape, xv, yv, &kinds, wv).unwrap();
        let got = tape.item(l);
        worst = worst.max((got - brute_smax(&x, &y, &kinds, &w)).abs());

        let cs: Vec<f64> = (0..b).map(|p| cos(x.row(p), y.row(p))).collect();
        let want_cos = (0..b)
            .map(|p| {
                let delta = if kinds[p] {
                    cfg.delta_pos
                } else {
                    cfg.delta_neg
                };
                (delta - cs[p]).powi(2)
            })
            .sum::<f64>()
            / b as f64;
        let l = cos_loss(&mut tape, xv, yv, &kinds, &cfg).unwrap();
        let got = tape.item(l);
        worst = worst.max((got - want_cos).abs());

        let dcos: Vec<f64> = cs.iter().map(|c| 1.0 - c).collect();
        let brute_keep = brute_hard(&dcos, &kinds);
        if hard_pair_mask(&dcos, &kinds) != brute_keep {
            mask_mismatch += 1;
        }
        for online in [false, true] {
            let want: f64 = (0..b)
                .filter(|&p| !online || brute_keep[p])
                .map(|p| {
                    if kinds[p] {
                        dcos[p].powi(2)
                    } else {
                        (cfg.delta_margin - dcos[p]).max(0.0).powi(2)
                    }
                })
                .sum();
            let l = ocl_loss(&mut tape, xv, yv, &kinds, &cfg, online).unwrap();
            let got = tape.item(l);
            worst = worst.max((got - want).abs());
        }
    }
    check(
        worst < 1e-9 && mask_mismatch == 0,
        format!("max abs err {worst:.2e}, kept-set mismatches {mask_mismatch}/200"),
    )
}

fn pair_invariants() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut violations = 0;
    let mut checked = 0;
    let mut infeasible = 0;
    for trial in 0..100u64 {
        let classes = rng.random_range(2..=10);
        let mut data = Vec::new();
        for c in 0..classes {
            for k in 0..rng.random_range(2..=6) {
                data.push(LabeledUtterance::new(
                    format!("{c}-{k}"),
                    format!("text {c} {k}"),
                    format!("c{c}"),
                ));
            }
        }
        let n = rng.random_range(1..=3);
        let pairs = match build_pairs(&data, n, trial) {
            Ok(p) => p,
            Err(Error::NegativeSampling { .. }) => {
                infeasible += 1;
                continue;
            }
            Err(e) => panic!("{e}"),
        };
        checked += 1;
        let same = |(i, j): &(usize, usize)| data[*i].label == data[*j].label;
        if !pairs.positives.iter().all(same) || pairs.negatives.iter().any(same) {
            violations += 1;
        }
        if pairs.negatives.len() != 2 * n * pairs.positives.len() {
            violations += 1;
        }
    }
    check(
        violations == 0,
        format!(
            "{checked} datasets checked, {infeasible} infeasible for n, {violations} violations"
        ),
    )
}

fn knn_scale_invariance() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let mut mismatches = 0;
    for trial in 0..1000 {
        let rows = rng.random_range(2..=20);
        let d = rng.random_range(2..=8);
        let vectors = random_tensor(&mut rng, rows, d);
        let labels: Vec<String> = (0..rows).map(|i| format!("l{}", i % 4)).collect();
        let ids: Vec<String> = (0..rows).map(|i| format!("u{i}")).collect();
        let scaled =
            Tensor::matrix(rows, d, vectors.data().iter().map(|v| v * 7.3).collect()).unwrap();
        let pool =
            ExemplarPool::from_parts(vectors, labels.clone(), ids.clone(), "fp".into()).unwrap();
        let big = ExemplarPool::from_parts(scaled, labels, ids, "fp".into()).unwrap();
        let query: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let small_q: Vec<f64> = query.iter().map(|v| v * 0.2).collect();
        let k = 1 + trial % rows.min(5);
        let a = classify_vector(&query, &pool, k).unwrap();
        let b = classify_vector(&small_q, &big, k).unwrap();
        let order = |p: &Prediction| p.neighbors.iter().map(|n| n.index).collect::<Vec<_>>();
        if a.label != b.label || order(&a) != order(&b) {
            mismatches += 1;
        }
    }
    check(
        mismatches == 0,
        format!("{mismatches}/1000 pools changed label or ranking"),
    )
}

fn desk(seeds: &[u64]) -> ExperimentConfig {
    ExperimentConfig {
        seeds: seeds.to_vec(),
        ..ExperimentConfig::desk()
    }
}

fn mean_accuracy(cfg: &ExperimentConfig, data: &ExperimentData) -> (f64, Vec<f64>) {
    let out = run_pipeline_on(cfg, data).unwrap();
    (out.aggregate.mean, out.aggregate.runs)
}

fn synthetic_end_to_end(data: &ExperimentData) -> Outcome {
    let cfg = desk(&[1, 2, 3]);
    let (s2, runs) = mean_accuracy(&cfg, data);
    let untrained = ExperimentConfig {
        run_s2: false,
        ..cfg
    };
    let (base, _) = mean_accuracy(&untrained, data);
    check(
        s2 >= 0.90 && s2 - base >= 0.15,
        format!(
            "+S2-ocl {s2:.3} (runs {runs:.3?}), untrained kNN {base:.3}, gap {:.3}",
            s2 - base
        ),
    )
}

fn stage_synergy(data: &ExperimentData) -> Outcome {
    let cfg = desk(&[1, 2, 3, 4, 5]);
    let (s2, _) = mean_accuracy(&cfg, data);
    let (both, _) = mean_accuracy(
        &ExperimentConfig {
            run_s1: true,
            ..cfg
        },
        data,
    );
    check(
        both >= s2 - 0.02,
        format!("+S1+S2 {both:.3} vs +S2 {s2:.3} (diff {:+.3})", both - s2),
    )
}

fn silhouette_funnel(data: &ExperimentData) -> Outcome {
    let cfg = desk(&[1, 2, 3]);
    let mean_sil = |cfg: &ExperimentConfig| {
        let out = run_pipeline_on(cfg, data).unwrap();
        let s: Vec<f64> = out
            .runs
            .iter()
            .map(|r| r.report.silhouette.unwrap())
            .collect();
        s.iter().sum::<f64>() / s.len() as f64
    };
    let before = mean_sil(&ExperimentConfig {
        run_s2: false,
        ..cfg.clone()
    });
    let after = mean_sil(&cfg);

    let x = vec![
        vec![1.0, 0.1],
        vec![0.9, 0.2],
        vec![1.1, -0.1],
        vec![0.1, 1.0],
        vec![-0.2, 0.8],
        vec![0.3, 1.2],
    ];
    let labels = ["a", "a", "a", "b", "b", "b"];
    let mut oracle_err = 0.0f64;
    for d in [Distance::Cosine, Distance::Euclidean] {
        let got = silhouette(&Tensor::from_rows(&x).unwrap(), &labels, d).unwrap();
        oracle_err = oracle_err.max((got - brute_silhouette(&x, &labels, d)).abs());
    }
    check(
        before < after && after - before >= 0.2 && oracle_err < 1e-12,
        format!("untrained {before:.3} -> +S2 {after:.3} (gap {:.3}), hand-set oracle err {oracle_err:.1e}", after - before),
    )
}

fn brute_silhouette(x: &[Vec<f64>], labels: &[&str], d: Distance) -> f64 {
    let dist = |a: &[f64], b: &[f64]| match d {
        Distance::Euclidean => a
            .iter()
            .zip(b)
            .map(|(p, q)| (p - q).powi(2))
            .sum::<f64>()
            .sqrt(),
        Distance::Cosine => 1.0 - cos(a, b),
    };
    let classes: BTreeSet<&str> = labels.iter().copied().collect();
    let mut total = 0.0;
    for i in 0..x.len() {
        let mean_to = |l: &str| {
            let js: Vec<usize> = (0..x.len()).filter(|&j| j != i && labels[j] == l).collect();
            js.iter().map(|&j| dist(&x[i], &x[j])).sum::<f64>() / js.len() as f64
        };
        let a = mean_to(labels[i]);
        let b = classes
            .iter()
            .filter(|&&l| l != labels[i])
            .map(|l| mean_to(l))
            .fold(f64::INFINITY, f64::min);
        total += (b - a) / a.max(b);
    }
    total / x.len() as f64
}

fn inference_pool_growth(data: &ExperimentData) -> Outcome {
    let cfg = desk(&[1, 2, 3, 4, 5]);
    let probes = augment_probe(&cfg, data, &[]).unwrap();
    let mean =
        |idx: usize| probes.iter().map(|p| p.pools[idx].2).sum::<f64>() / probes.len() as f64;
    let (shot, full) = (mean(0), mean(1));
    check(
        full >= shot,
        format!("10-shot pool {shot:.3}, full pool {full:.3}"),
    )
}

fn similarity_vs_mlp(data: &ExperimentData) -> Outcome {
    let cfg = desk(&[1, 2, 3]);
    let (s2, _) = mean_accuracy(&cfg, data);
    // Frozen untrained embeddings at two init scales; the MLP is scale
    // sensitive, so compare against the better of the two.
    let mut mlp_best = 0.0f64;
    let mut parts = Vec::new();
    for init_std in [cfg.encoder.init_std, 1.0] {
        let mut c = ExperimentConfig {
            run_s2: false,
            classifier: Classifier::Mlp,
            ..cfg.clone()
        };
        c.encoder.init_std = init_std;
        let (acc, _) = mean_accuracy(&c, data);
        parts.push(format!("init_std {init_std}: {acc:.3}"));
        mlp_best = mlp_best.max(acc);
    }
    check(
        s2 >= mlp_best,
        format!(
            "+S2-ocl kNN {s2:.3} vs MLP on frozen untrained ({})",
            parts.join(", ")
        ),
    )
}

fn determinism_and_persistence(data: &ExperimentData) -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig {
        run_s1: true,
        ..desk(&[1, 2])
    };
    for tag in ["a", "b"] {
        let out = run_pipeline_on(&cfg, data).unwrap();
        write_outputs(&out, &dir.path().join(tag)).unwrap();
    }
    let mut identical = true;
    for f in [
        "report.json",
        "table.txt",
        "encoder-seed1.cfit",
        "encoder-seed2.cfit",
    ] {
        let a = std::fs::read(dir.path().join("a").join(f)).unwrap();
        let b = std::fs::read(dir.path().join("b").join(f)).unwrap();
        identical &= a == b;
    }

    let path = dir.path().join("a/encoder-seed1.cfit");
    let bytes = std::fs::read(&path).unwrap();
    let loaded = Checkpoint::load(&path).unwrap();
    let round_trip = loaded.to_bytes().unwrap() == bytes;

    let mut corrupt = bytes.clone();
    let mid = corrupt.len() / 2;
    corrupt[mid] ^= 0x20;
    let rejected = matches!(
        Checkpoint::from_bytes(&corrupt),
        Err(Error::Checksum { .. })
    );
    check(
        identical && round_trip && rejected,
        format!("byte-identical reruns {identical}, bit-exact reload {round_trip}, corruption rejected {rejected}"),
    )
}

fn main() -> ExitCode {
    let data = ExperimentData::load(&ExperimentConfig::desk()).expect("synthetic data");
    type Criterion<'a> = (&'a str, Duration, Box<dyn Fn() -> Outcome + 'a>);
    let criteria: Vec<Criterion> = vec![
        (
            "gradient suite",
            Duration::from_secs(60),
            Box::new(gradient_suite),
        ),
        (
            "loss oracles",
            Duration::from_secs(60),
            Box::new(loss_oracles),
        ),
        (
            "pair-set invariants",
            Duration::from_secs(30),
            Box::new(pair_invariants),
        ),
        (
            "kNN scale invariance",
            Duration::from_secs(30),
            Box::new(knn_scale_invariance),
        ),
        (
            "synthetic end-to-end",
            Duration::from_secs(300),
            Box::new(|| synthetic_end_to_end(&data)),
        ),
        (
            "stage synergy",
            Duration::from_secs(600),
            Box::new(|| stage_synergy(&data)),
        ),
        (
            "silhouette funnel",
            Duration::from_secs(120),
            Box::new(|| silhouette_funnel(&data)),
        ),
        (
            "inference pool growth",
            Duration::from_secs(300),
            Box::new(|| inference_pool_growth(&data)),
        ),
        (
            "similarity vs MLP",
            Duration::from_secs(300),
            Box::new(|| similarity_vs_mlp(&data)),
        ),
        (
            "determinism and persistence",
            Duration::from_secs(60),
            Box::new(|| determinism_and_persistence(&data)),
        ),
    ];
    let mut failed = 0;
    for (i, (name, budget, run)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = run();
        let elapsed = start.elapsed();
        let in_time = elapsed <= *budget;
        let ok = outcome.passed && in_time;
        failed += usize::from(!ok);
        println!(
            "criterion {:>2} {:<28} {}  {} [{:.1}s / {}s]",
            i + 1,
            name,
            if ok { "PASS" } else { "FAIL" },
            outcome.detail,
            elapsed.as_secs_f64(),
            budget.as_secs()
        );
    }
    println!(
        "{} of {} criteria passed",
        criteria.len() - failed,
        criteria.len()
    );
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
