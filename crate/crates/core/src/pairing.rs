//! Stage 1 response-ranking batches, Stage 2 positive/negative pair sets and
//! N-shot subsampling.

use std::collections::BTreeMap;

use rand::seq::{index, SliceRandom};
use serde::{Deserialize, Serialize};

pub use crate::data::{LabeledUtterance, ResponsePair};
use crate::error::{Error, Result};
use crate::rng::{seeded, Stream};

/// Default bound on positives per anchor utterance.
pub const DEFAULT_MAX_POSITIVES_PER_ANCHOR: usize = 50;

/// Positive pairs (same label) and their `2·n` sampled negatives.
///
/// Pairs are dataset indices. The negatives of positive `k` occupy
/// `negatives[2·n·k .. 2·n·(k+1)]`: first the `n` pairs anchored on the
/// left member, then the `n` anchored on the right member.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairSet {
    pub positives: Vec<(usize, usize)>,
    pub negatives: Vec<(usize, usize)>,
    pub n: usize,
}

/// One training pair in interleaved order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Pair {
    pub left: usize,
    pub right: usize,
    pub positive: bool,
}

impl PairSet {
    /// Each positive followed by its own negatives.
    pub fn interleaved(&self) -> Vec<Pair> {
        let per = 2 * self.n;
        let mut out = Vec::with_capacity(self.positives.len() + self.negatives.len());
        for (k, &(l, r)) in self.positives.iter().enumerate() {
            out.push(Pair {
                left: l,
                right: r,
                positive: true,
            });
            for &(l, r) in &self.negatives[k * per..(k + 1) * per] {
                out.push(Pair {
                    left: l,
                    right: r,
                    positive: false,
                });
            }
        }
        out
    }

    pub fn len(&self) -> usize {
        self.positives.len() + self.negatives.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positives.is_empty()
    }
}

/// Serializable view of a [`PairSet`] with utterance ids.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PairFile {
    pub n: usize,
    pub positives: Vec<(String, String)>,
    pub negatives: Vec<(String, String)>,
}

impl PairFile {
    pub fn from_pairs(pairs: &PairSet, data: &[LabeledUtterance]) -> Self {
        let ids = |v: &[(usize, usize)]| {
            v.iter()
                .map(|&(i, j)| (data[i].id.clone(), data[j].id.clone()))
                .collect()
        };
        Self {
            n: pairs.n,
            positives: ids(&pairs.positives),
            negatives: ids(&pairs.negatives),
        }
    }
}

fn class_members(data: &[LabeledUtterance]) -> BTreeMap<&str, Vec<usize>> {
    let mut classes: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, u) in data.iter().enumerate() {
        classes.entry(u.label.as_str()).or_default().push(i);
    }
    classes
}

pub fn build_pairs(data: &[LabeledUtterance], n: usize, seed: u64) -> Result<PairSet> {
    build_pairs_capped(data, n, seed, DEFAULT_MAX_POSITIVES_PER_ANCHOR)
}

/// Builds PP from within-class pairs `(i, j)`, `i < j` in dataset order,
/// keeping at most `max_per_anchor` per anchor `i` (seeded subsample), then
/// draws `n` out-of-class partners for each side of every positive.
pub fn build_pairs_capped(
    data: &[LabeledUtterance],
    n: usize,
    seed: u64,
    max_per_anchor: usize,
) -> Result<PairSet> {
    if n == 0 {
        return Err(Error::Config(
            "negatives per positive (n) must be at least 1".into(),
        ));
    }
    if max_per_anchor == 0 {
        return Err(Error::Config(
            "max positives per anchor must be at least 1".into(),
        ));
    }
    crate::data::validate_dataset(data)?;
    let classes = class_members(data);
    if classes.len() < 2 {
        return Err(Error::Config(format!(
            "pair construction needs at least 2 classes, found {}",
            classes.len()
        )));
    }
    if let Some((label, _)) = classes.iter().find(|(_, m)| m.len() < 2) {
        return Err(Error::SingletonClass(label.to_string()));
    }

    let mut rng = seeded(seed, Stream::Pairs);
    let mut positives = Vec::new();
    for i in 0..data.len() {
        let partners: Vec<usize> = classes[data[i].label.as_str()]
            .iter()
            .copied()
            .filter(|&j| j > i)
            .collect();
        if partners.len() > max_per_anchor {
            let mut keep: Vec<usize> =
                index::sample(&mut rng, partners.len(), max_per_anchor).into_vec();
            keep.sort_unstable();
            positives.extend(keep.into_iter().map(|k| (i, partners[k])));
        } else {
            positives.extend(partners.into_iter().map(|j| (i, j)));
        }
    }

    // Out-of-class candidates per label, in dataset order.
    let outside: BTreeMap<&str, Vec<usize>> = classes
        .keys()
        .map(|&label| {
            let others = (0..data.len())
                .filter(|&k| data[k].label != label)
                .collect();
            (label, others)
        })
        .collect();
    let draw = |label: &str, rng: &mut rand_chacha::ChaCha8Rng| -> Result<Vec<usize>> {
        let pool = &outside[label];
        if pool.len() < n {
            return Err(Error::NegativeSampling {
                label: label.to_string(),
                requested: n,
                available: pool.len(),
            });
        }
        Ok(index::sample(rng, pool.len(), n)
            .into_iter()
            .map(|k| pool[k])
            .collect())
    };

    let mut negatives = Vec::with_capacity(2 * n * positives.len());
    for &(i, j) in &positives {
        for neg in draw(&data[i].label, &mut rng)? {
            negatives.push((i, neg));
        }
        for neg in draw(&data[j].label, &mut rng)? {
            negatives.push((neg, j));
        }
    }
    Ok(PairSet {
        positives,
        negatives,
        n,
    })
}

/// Shuffles and cuts into full batches of `batch_size`; the remainder is
/// dropped.
pub fn make_mneg_batches(
    pairs: &[ResponsePair],
    batch_size: usize,
    seed: u64,
) -> Result<Vec<Vec<ResponsePair>>> {
    if batch_size < 2 {
        return Err(Error::Config(format!(
            "response-ranking batches need at least 2 pairs, got {batch_size}"
        )));
    }
    if pairs.len() < batch_size {
        return Err(Error::Config(format!(
            "corpus of {} pairs is smaller than batch size {batch_size}",
            pairs.len()
        )));
    }
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    order.shuffle(&mut seeded(seed, Stream::Batches));
    Ok(order
        .chunks_exact(batch_size)
        .map(|c| c.iter().map(|&i| pairs[i].clone()).collect())
        .collect())
}

/// Exactly `shots` utterances per class, sorted by class name and then by
/// original position.
pub fn sample_few_shot(
    data: &[LabeledUtterance],
    shots: usize,
    seed: u64,
) -> Result<Vec<LabeledUtterance>> {
    if shots == 0 {
        return Err(Error::Config("few-shot size must be at least 1".into()));
    }
    let mut rng = seeded(seed, Stream::FewShot);
    let mut out = Vec::with_capacity(shots * 8);
    for (label, members) in class_members(data) {
        if members.len() < shots {
            return Err(Error::UndersizedClass {
                label: label.to_string(),
                requested: shots,
                available: members.len(),
            });
        }
        let mut picked: Vec<usize> = index::sample(&mut rng, members.len(), shots)
            .into_iter()
            .map(|k| members[k])
            .collect();
        picked.sort_unstable();
        out.extend(picked.into_iter().map(|i| data[i].clone()));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dataset(classes: usize, per: usize) -> Vec<LabeledUtterance> {
        (0..classes * per)
            .map(|i| {
                LabeledUtterance::new(
                    format!("u{i}"),
                    format!("text {i}"),
                    format!("c{}", i % classes),
                )
            })
            .collect()
    }

    #[test]
    fn two_by_two_counts() {
        let p = build_pairs(&dataset(2, 2), 1, 7).unwrap();
        assert_eq!(p.positives.len(), 2);
        assert_eq!(p.negatives.len(), 4);
        assert_eq!(p.interleaved().len(), 6);
    }

    #[test]
    fn ten_shot_class_gives_45_positives() {
        let data = dataset(3, 10);
        let p = build_pairs(&data, 1, 0).unwrap();
        let c0 = p
            .positives
            .iter()
            .filter(|&&(i, _)| data[i].label == "c0")
            .count();
        assert_eq!(c0, 45);
    }

    #[test]
    fn label_discipline_and_determinism() {
        let data = dataset(4, 5);
        let a = build_pairs(&data, 3, 11).unwrap();
        let b = build_pairs(&data, 3, 11).unwrap();
        assert_eq!(
            serde_json::to_vec(&a).unwrap(),
            serde_json::to_vec(&b).unwrap()
        );
        for &(i, j) in &a.positives {
            assert_eq!(data[i].label, data[j].label);
            assert_ne!(i, j);
        }
        for &(i, j) in &a.negatives {
            assert_ne!(data[i].label, data[j].label);
        }
        assert_eq!(a.negatives.len(), 2 * 3 * a.positives.len());
        assert_ne!(a, build_pairs(&data, 3, 12).unwrap());
    }

    #[test]
    fn negatives_distinct_within_one_positive() {
        let data = dataset(3, 4);
        let p = build_pairs(&data, 4, 1).unwrap();
        for chunk in p.negatives.chunks(4) {
            let mut partners: Vec<_> = chunk
                .iter()
                .map(|&(a, b)| a.max(b) * 1000 + a.min(b))
                .collect();
            partners.sort_unstable();
            partners.dedup();
            assert_eq!(partners.len(), 4);
        }
    }

    #[test]
    fn pairing_errors() {
        let mut data = dataset(2, 2);
        data.push(LabeledUtterance::new("lonely", "x", "solo"));
        match build_pairs(&data, 1, 0) {
            Err(Error::SingletonClass(c)) => assert_eq!(c, "solo"),
            other => panic!("{other:?}"),
        }
        assert!(matches!(
            build_pairs(&dataset(2, 2), 3, 0),
            Err(Error::NegativeSampling { available: 2, .. })
        ));
        assert!(build_pairs(&dataset(1, 4), 1, 0).is_err());
    }

    #[test]
    fn positive_cap_applies_per_anchor() {
        let data = dataset(2, 12);
        let p = build_pairs_capped(&data, 1, 3, 4).unwrap();
        let mut per_anchor = BTreeMap::new();
        for &(i, _) in &p.positives {
            *per_anchor.entry(i).or_insert(0) += 1;
        }
        assert!(per_anchor.values().all(|&c| c <= 4));
        assert_eq!(per_anchor[&0], 4);
    }

    #[test]
    fn mneg_batches() {
        let pairs: Vec<ResponsePair> = (0..10)
            .map(|i| ResponsePair {
                context: format!("c{i}"),
                response: format!("r{i}"),
            })
            .collect();
        let b = make_mneg_batches(&pairs, 4, 3).unwrap();
        assert_eq!(b.len(), 2);
        assert!(b.iter().all(|x| x.len() == 4));
        assert_eq!(b, make_mneg_batches(&pairs, 4, 3).unwrap());
        assert_eq!(make_mneg_batches(&pairs, 2, 3).unwrap().len(), 5);
        assert!(make_mneg_batches(&pairs, 1, 3).is_err());
        assert!(make_mneg_batches(&pairs[..3], 4, 3).is_err());
    }

    #[test]
    fn few_shot_sampling() {
        let data = dataset(77, 12);
        let s = sample_few_shot(&data, 10, 1).unwrap();
        assert_eq!(s.len(), 770);
        let t = sample_few_shot(&data, 10, 2).unwrap();
        assert_ne!(s, t);
        let whole = sample_few_shot(&data, 12, 5).unwrap();
        assert_eq!(whole.len(), data.len());
        assert!(whole.windows(2).all(|w| w[0].label <= w[1].label));
        match sample_few_shot(&dataset(2, 3), 4, 0) {
            Err(Error::UndersizedClass { available, .. }) => assert_eq!(available, 3),
            other => panic!("{other:?}"),
        }
    }
}
