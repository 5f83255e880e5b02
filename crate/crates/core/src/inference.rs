//! Nearest-neighbour intent classification over an exemplar pool.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;

use crate::data::LabeledUtterance;
use crate::encoder::{write_vectors_tsv, EmbeddingStore, Encoder};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Encoded exemplars with their labels and the fingerprint of the encoder
/// that produced them. Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct ExemplarPool {
    vectors: Tensor,
    norms: Vec<f64>,
    labels: Vec<String>,
    ids: Vec<String>,
    fingerprint: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Neighbor {
    pub index: usize,
    pub id: String,
    pub label: String,
    pub similarity: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub label: String,
    /// The top-k exemplars, most similar first.
    pub neighbors: Vec<Neighbor>,
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

impl ExemplarPool {
    /// Assembles a pool from pre-computed rows. Every row must be nonzero.
    pub fn from_parts(
        vectors: Tensor,
        labels: Vec<String>,
        ids: Vec<String>,
        fingerprint: String,
    ) -> Result<Self> {
        if vectors.shape().len() != 2 {
            return Err(Error::ShapeMismatch {
                op: "ExemplarPool",
                left: vectors.shape().to_vec(),
                right: vec![0, 0],
            });
        }
        if labels.len() != vectors.rows() || ids.len() != vectors.rows() {
            return Err(Error::ShapeMismatch {
                op: "ExemplarPool",
                left: vec![vectors.rows()],
                right: vec![labels.len(), ids.len()],
            });
        }
        let mut seen = BTreeSet::new();
        for id in &ids {
            if !seen.insert(id.as_str()) {
                return Err(Error::DuplicateId(id.clone()));
            }
        }
        let norms: Vec<f64> = (0..vectors.rows()).map(|i| norm(vectors.row(i))).collect();
        if let Some(i) = norms.iter().position(|&n| n == 0.0 || !n.is_finite()) {
            return Err(Error::ZeroEmbedding(ids[i].clone()));
        }
        Ok(Self {
            vectors,
            norms,
            labels,
            ids,
            fingerprint,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn vectors(&self) -> &Tensor {
        &self.vectors
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    fn check_encoder(&self, encoder: &Encoder) -> Result<()> {
        if encoder.fingerprint() != self.fingerprint {
            return Err(Error::FingerprintMismatch {
                pool: self.fingerprint.clone(),
                encoder: encoder.fingerprint().to_string(),
            });
        }
        Ok(())
    }

    /// Writes the vectors in store TSV format plus a labels file: a
    /// `#fingerprint=` line, then `id<TAB>label` per row.
    pub fn export(&self, vectors_path: &Path, labels_path: &Path) -> Result<()> {
        write_vectors_tsv(
            vectors_path,
            self.vectors.cols(),
            self.ids
                .iter()
                .enumerate()
                .map(|(i, id)| (id.as_str(), self.vectors.row(i))),
        )?;
        write_labels(
            labels_path,
            &self.fingerprint,
            self.ids.iter().zip(&self.labels),
        )
    }

    pub fn import(vectors_path: &Path, labels_path: &Path) -> Result<Self> {
        let store = EmbeddingStore::read_tsv(vectors_path)?;
        let (fingerprint, rows) = read_labels(labels_path)?;
        let ids: Vec<&str> = rows.iter().map(|(id, _)| id.as_str()).collect();
        let vectors = store.matrix(&ids)?;
        let (ids, labels) = rows.into_iter().unzip();
        Self::from_parts(vectors, labels, ids, fingerprint)
    }
}

pub fn write_labels<'a>(
    path: &Path,
    fingerprint: &str,
    rows: impl IntoIterator<Item = (&'a String, &'a String)>,
) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "#fingerprint={fingerprint}")?;
    for (id, label) in rows {
        writeln!(w, "{id}\t{label}")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_labels(path: &Path) -> Result<(String, Vec<(String, String)>)> {
    let perr = |line: usize, msg: &str| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg: msg.to_string(),
    };
    let mut fingerprint = None;
    let mut rows = Vec::new();
    for (i, line) in BufReader::new(File::open(path)?).lines().enumerate() {
        let line = line?;
        if let Some(fp) = line.strip_prefix("#fingerprint=") {
            fingerprint = Some(fp.trim().to_string());
        } else if !line.starts_with('#') && !line.trim().is_empty() {
            let (id, label) = line
                .split_once('\t')
                .ok_or_else(|| perr(i + 1, "expected id<TAB>label"))?;
            rows.push((id.to_string(), label.to_string()));
        }
    }
    let fingerprint = fingerprint.ok_or_else(|| perr(0, "missing #fingerprint= line"))?;
    Ok((fingerprint, rows))
}

fn encode_rows(
    data: &[LabeledUtterance],
    encoder: &Encoder,
    store: Option<&EmbeddingStore>,
) -> Result<Tensor> {
    let t = encoder.encode_utterances(data, store)?;
    for (i, u) in data.iter().enumerate() {
        if t.row(i).iter().all(|&x| x == 0.0) {
            return Err(Error::ZeroEmbedding(u.id.clone()));
        }
    }
    Ok(t)
}

/// Encodes every utterance with `encoder`.
pub fn build_pool(
    data: &[LabeledUtterance],
    encoder: &Encoder,
    store: Option<&EmbeddingStore>,
) -> Result<ExemplarPool> {
    if data.is_empty() {
        return Err(Error::EmptyInput("build_pool"));
    }
    let vectors = encode_rows(data, encoder, store)?;
    ExemplarPool::from_parts(
        vectors,
        data.iter().map(|u| u.label.clone()).collect(),
        data.iter().map(|u| u.id.clone()).collect(),
        encoder.fingerprint().to_string(),
    )
}

/// Returns a new pool with `extra` appended; `pool` is left as is.
pub fn augment_pool(
    pool: &ExemplarPool,
    extra: &[LabeledUtterance],
    encoder: &Encoder,
    store: Option<&EmbeddingStore>,
) -> Result<ExemplarPool> {
    pool.check_encoder(encoder)?;
    if extra.is_empty() {
        return Ok(pool.clone());
    }
    let rows = encode_rows(extra, encoder, store)?;
    let mut labels = pool.labels.clone();
    labels.extend(extra.iter().map(|u| u.label.clone()));
    let mut ids = pool.ids.clone();
    ids.extend(extra.iter().map(|u| u.id.clone()));
    ExemplarPool::from_parts(
        pool.vectors.vstack(&rows)?,
        labels,
        ids,
        pool.fingerprint.clone(),
    )
}

/// Ranks the pool against a query vector and votes among the top `k`.
///
/// Ranking is by cosine, descending, with pool order breaking ties. For
/// `k > 1` the label with most hits wins, then the larger summed
/// similarity, then the lexicographically smaller label.
pub fn classify_vector(query: &[f64], pool: &ExemplarPool, k: usize) -> Result<Prediction> {
    if pool.is_empty() {
        return Err(Error::EmptyInput("classify pool"));
    }
    if k == 0 || k > pool.len() {
        return Err(Error::Config(format!(
            "k must lie in 1..={}, got {k}",
            pool.len()
        )));
    }
    if query.len() != pool.vectors.cols() {
        return Err(Error::ShapeMismatch {
            op: "classify",
            left: vec![pool.vectors.cols()],
            right: vec![query.len()],
        });
    }
    let qn = norm(query);
    if qn == 0.0 || !qn.is_finite() {
        return Err(Error::DegenerateVector("classify query"));
    }
    let sims: Vec<f64> = (0..pool.len())
        .map(|i| {
            let dot: f64 = pool
                .vectors
                .row(i)
                .iter()
                .zip(query)
                .map(|(a, b)| a * b)
                .sum();
            (dot / (pool.norms[i] * qn)).clamp(-1.0, 1.0)
        })
        .collect();
    let mut order: Vec<usize> = (0..pool.len()).collect();
    order.sort_by(|&a, &b| sims[b].total_cmp(&sims[a]).then(a.cmp(&b)));
    order.truncate(k);

    let neighbors: Vec<Neighbor> = order
        .iter()
        .map(|&i| Neighbor {
            index: i,
            id: pool.ids[i].clone(),
            label: pool.labels[i].clone(),
            similarity: sims[i],
        })
        .collect();

    let mut votes: BTreeMap<&str, (usize, f64)> = BTreeMap::new();
    for n in &neighbors {
        let e = votes.entry(n.label.as_str()).or_insert((0, 0.0));
        e.0 += 1;
        e.1 += n.similarity;
    }
    // BTreeMap iterates labels in order, so the strict comparison keeps the
    // smallest label among full ties.
    let mut best: Option<(&str, usize, f64)> = None;
    for (label, (count, sum)) in votes {
        let better = match best {
            None => true,
            Some((_, bc, bs)) => count > bc || (count == bc && sum > bs),
        };
        if better {
            best = Some((label, count, sum));
        }
    }
    Ok(Prediction {
        label: best.expect("k >= 1").0.to_string(),
        neighbors,
    })
}

/// Encodes `query` and classifies it against `pool`.
pub fn classify(
    query: &str,
    pool: &ExemplarPool,
    k: usize,
    encoder: &Encoder,
) -> Result<Prediction> {
    pool.check_encoder(encoder)?;
    let v = encoder.encode_texts(&[query])?;
    classify_vector(v.data(), pool, k)
}

/// Classifies each row of `queries`, in parallel. Per-row failures are
/// returned in place.
pub fn classify_rows(queries: &Tensor, pool: &ExemplarPool, k: usize) -> Vec<Result<Prediction>> {
    (0..queries.rows())
        .into_par_iter()
        .map(|i| classify_vector(queries.row(i), pool, k))
        .collect()
}

/// Encodes and classifies utterances with a fingerprint check.
pub fn classify_utterances(
    utts: &[LabeledUtterance],
    pool: &ExemplarPool,
    k: usize,
    encoder: &Encoder,
    store: Option<&EmbeddingStore>,
) -> Result<Vec<Result<Prediction>>> {
    pool.check_encoder(encoder)?;
    if utts.is_empty() {
        return Ok(Vec::new());
    }
    let q = encoder.encode_utterances(utts, store)?;
    Ok(classify_rows(&q, pool, k))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{EncoderConfig, EncoderParams};

    fn pool(rows: &[Vec<f64>], labels: &[&str]) -> ExemplarPool {
        ExemplarPool::from_parts(
            Tensor::from_rows(rows).unwrap(),
            labels.iter().map(|s| s.to_string()).collect(),
            (0..rows.len()).map(|i| format!("p{i}")).collect(),
            "fp".into(),
        )
        .unwrap()
    }

    fn encoder(seed: u64) -> Encoder {
        let cfg = EncoderConfig {
            hash_buckets: 257,
            embed_dim: 8,
            projection_dim: 4,
            ..EncoderConfig::default()
        };
        let params = EncoderParams::init(&cfg, seed).unwrap();
        Encoder::new(cfg, params).unwrap()
    }

    fn utts() -> Vec<LabeledUtterance> {
        vec![
            LabeledUtterance::new("a", "lost my card", "card"),
            LabeledUtterance::new("b", "card stolen yesterday", "card"),
            LabeledUtterance::new("c", "payment failed", "pay"),
            LabeledUtterance::new("d", "cannot pay bill", "pay"),
        ]
    }

    #[test]
    fn argmax_of_two() {
        // cos 0.9 and 0.1 against the query [1, 0].
        let a = vec![0.9, (1.0f64 - 0.81).sqrt()];
        let b = vec![0.1, (1.0f64 - 0.01).sqrt()];
        let p = pool(&[a, b], &["A", "B"]);
        let pred = classify_vector(&[1.0, 0.0], &p, 1).unwrap();
        assert_eq!(pred.label, "A");
        assert!((pred.neighbors[0].similarity - 0.9).abs() < 1e-12);
    }

    #[test]
    fn majority_vote() {
        let p = pool(
            &[
                vec![1.0, 0.0],
                vec![0.9, 0.1],
                vec![0.95, 0.05],
                vec![0.0, 1.0],
            ],
            &["B", "A", "A", "C"],
        );
        assert_eq!(classify_vector(&[1.0, 0.0], &p, 3).unwrap().label, "A");
        assert_eq!(classify_vector(&[1.0, 0.0], &p, 1).unwrap().label, "B");
    }

    #[test]
    fn vote_ties_break_on_similarity_then_label() {
        let p = pool(&[vec![1.0, 0.0], vec![0.8, 0.2]], &["B", "A"]);
        assert_eq!(classify_vector(&[1.0, 0.0], &p, 2).unwrap().label, "B");
        let q = pool(&[vec![1.0, 0.0], vec![1.0, 0.0]], &["B", "A"]);
        assert_eq!(classify_vector(&[1.0, 0.0], &q, 2).unwrap().label, "A");
        // Equal similarity ranks by pool order.
        let pred = classify_vector(&[1.0, 0.0], &q, 1).unwrap();
        assert_eq!(pred.neighbors[0].index, 0);
    }

    #[test]
    fn rejects_bad_k_and_zero_query() {
        let p = pool(&[vec![1.0, 0.0]], &["A"]);
        assert!(classify_vector(&[1.0, 0.0], &p, 0).is_err());
        assert!(classify_vector(&[1.0, 0.0], &p, 2).is_err());
        assert!(matches!(
            classify_vector(&[0.0, 0.0], &p, 1),
            Err(Error::DegenerateVector(_))
        ));
        assert!(matches!(
            ExemplarPool::from_parts(
                Tensor::from_rows(&[vec![0.0, 0.0]]).unwrap(),
                vec!["A".into()],
                vec!["x".into()],
                "fp".into()
            ),
            Err(Error::ZeroEmbedding(_))
        ));
    }

    #[test]
    fn identical_text_returns_its_label() {
        let enc = encoder(2);
        let data = utts();
        let p = build_pool(&data, &enc, None).unwrap();
        assert_eq!(p.len(), 4);
        for u in &data {
            let pred = classify(&u.text, &p, 1, &enc).unwrap();
            assert_eq!(pred.label, u.label);
            assert!((pred.neighbors[0].similarity - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn duplicate_texts_keep_rows() {
        let enc = encoder(2);
        let data = vec![
            LabeledUtterance::new("a", "same words", "x"),
            LabeledUtterance::new("b", "same words", "x"),
        ];
        let p = build_pool(&data, &enc, None).unwrap();
        assert_eq!(p.vectors().row(0), p.vectors().row(1));
    }

    #[test]
    fn fingerprint_guard() {
        let p = build_pool(&utts(), &encoder(2), None).unwrap();
        let other = encoder(3);
        assert!(matches!(
            classify("lost card", &p, 1, &other),
            Err(Error::FingerprintMismatch { .. })
        ));
        assert!(augment_pool(&p, &utts(), &other, None).is_err());
    }

    #[test]
    fn augment_has_value_semantics() {
        let enc = encoder(2);
        let data = utts();
        let p = build_pool(&data[..2], &enc, None).unwrap();
        let same = augment_pool(&p, &[], &enc, None).unwrap();
        assert_eq!(same, p);
        let bigger = augment_pool(&p, &data[2..], &enc, None).unwrap();
        assert_eq!(p.len(), 2);
        assert_eq!(bigger.len(), 4);
        assert_eq!(bigger.vectors().row(0), p.vectors().row(0));
    }

    #[test]
    fn export_import_round_trip() {
        let enc = encoder(2);
        let p = build_pool(&utts(), &enc, None).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let (v, l) = (dir.path().join("pool.tsv"), dir.path().join("pool.labels"));
        p.export(&v, &l).unwrap();
        let back = ExemplarPool::import(&v, &l).unwrap();
        assert_eq!(back.labels(), p.labels());
        assert_eq!(back.ids(), p.ids());
        assert_eq!(back.fingerprint(), enc.fingerprint());
        for (a, b) in back.vectors().data().iter().zip(p.vectors().data()) {
            assert_eq!(*a as f32, *b as f32);
        }
    }
}
