//! Sentence encoder: tokenization, hashed n-gram features, mean pooling and
//! an optional Tanh down-projection head.
//!
//! Two input modes exist. In `trainable` mode the encoder owns an embedding
//! table indexed by hashed n-gram ids. In `external` mode utterance vectors
//! come from an [`EmbeddingStore`] and only the projection head is trained.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng::{seeded, Stream};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncoderMode {
    Trainable,
    External,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub embed_dim: usize,
    pub hash_buckets: usize,
    pub max_seq_len: usize,
    pub ngram_orders: BTreeSet<usize>,
    pub projection_dim: usize,
    pub mode: EncoderMode,
    /// Standard deviation of the Gaussian embedding-table init.
    pub init_std: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            embed_dim: 64,
            hash_buckets: 1 << 16,
            max_seq_len: 48,
            ngram_orders: BTreeSet::from([1, 2]),
            projection_dim: 32,
            mode: EncoderMode::Trainable,
            init_std: 0.01,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("encoder: {m}")));
        if self.embed_dim == 0 || self.hash_buckets == 0 {
            return bad("embed_dim and hash_buckets must be positive");
        }
        if self.max_seq_len == 0 {
            return bad("max_seq_len must be at least 1");
        }
        if self.projection_dim == 0 {
            return bad("projection_dim must be at least 1");
        }
        if !(self.init_std.is_finite() && self.init_std > 0.0) {
            return bad("init_std must be positive and finite");
        }
        if self.ngram_orders.is_empty() || self.ngram_orders.contains(&0) {
            return bad("ngram_orders must be a nonempty set of positive orders");
        }
        Ok(())
    }

    pub fn tokenize(&self, text: &str) -> Vec<String> {
        tokenize(text, self.max_seq_len)
    }

    /// Tokenizes and featurizes in one go.
    pub fn features(&self, text: &str) -> Vec<usize> {
        featurize(&self.tokenize(text), self)
    }
}

/// Lowercases, splits on Unicode whitespace, strips non-alphanumeric
/// characters from token edges and keeps at most `max_len` tokens.
pub fn tokenize(text: &str, max_len: usize) -> Vec<String> {
    text.split_whitespace()
        .map(|w| {
            w.trim_matches(|c: char| !c.is_alphanumeric())
                .to_lowercase()
        })
        .filter(|w| !w.is_empty())
        .take(max_len)
        .collect()
}

/// 64-bit FNV-1a.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Hashed n-gram ids; n-grams are tokens joined by single spaces. The
/// result keeps multiplicity, ordered by n then position.
pub fn featurize(tokens: &[String], cfg: &EncoderConfig) -> Vec<usize> {
    let buckets = cfg.hash_buckets as u64;
    let mut ids = Vec::new();
    for &n in &cfg.ngram_orders {
        if n == 0 || n > tokens.len() {
            continue;
        }
        for w in tokens.windows(n) {
            ids.push((fnv1a64(w.join(" ").as_bytes()) % buckets) as usize);
        }
    }
    ids
}

/// The Tanh down-projection `tanh(h·W + b)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionHead {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl ProjectionHead {
    /// Xavier-uniform weight, zero bias.
    pub fn xavier(input_dim: usize, output_dim: usize, seed: u64) -> Self {
        Self {
            weight: xavier_uniform(
                input_dim,
                output_dim,
                &mut seeded(seed, Stream::ProjectionInit),
            ),
            bias: Tensor::zeros(&[output_dim]),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn output_dim(&self) -> usize {
        self.weight.shape()[1]
    }
}

pub fn xavier_uniform(fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Tensor {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out)
        .map(|_| rng.random_range(-bound..bound))
        .collect();
    Tensor::matrix(fan_in, fan_out, data).expect("positive dims")
}

/// Trainable encoder state.
///
/// The embedding table is absent in external mode; the projection head is
/// absent until Stage 2 attaches it.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub embedding_table: Option<Tensor>,
    pub projection: Option<ProjectionHead>,
}

pub const EMBEDDING_TABLE: &str = "embedding_table";
pub const PROJ_WEIGHT: &str = "proj_weight";
pub const PROJ_BIAS: &str = "proj_bias";

impl EncoderParams {
    /// Fresh parameters: a Gaussian embedding table (std `init_std`) in
    /// trainable mode, a projection head in external mode (there is nothing
    /// else to train there).
    pub fn init(cfg: &EncoderConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        Ok(match cfg.mode {
            EncoderMode::Trainable => {
                let mut rng = seeded(seed, Stream::EmbeddingInit);
                let n = cfg.hash_buckets * cfg.embed_dim;
                let data = (0..n)
                    .map(|_| cfg.init_std * rng.sample::<f64, _>(StandardNormal))
                    .collect();
                Self {
                    embedding_table: Some(Tensor::matrix(cfg.hash_buckets, cfg.embed_dim, data)?),
                    projection: None,
                }
            }
            EncoderMode::External => Self {
                embedding_table: None,
                projection: Some(ProjectionHead::xavier(
                    cfg.embed_dim,
                    cfg.projection_dim,
                    seed,
                )),
            },
        })
    }

    pub fn projection_enabled(&self) -> bool {
        self.projection.is_some()
    }

    /// Attaches a fresh head unless one is already present.
    pub fn ensure_projection(&mut self, cfg: &EncoderConfig, seed: u64) {
        if self.projection.is_none() {
            self.projection = Some(ProjectionHead::xavier(
                cfg.embed_dim,
                cfg.projection_dim,
                seed,
            ));
        }
    }

    pub fn output_dim(&self, cfg: &EncoderConfig) -> usize {
        self.projection
            .as_ref()
            .map_or(cfg.embed_dim, ProjectionHead::output_dim)
    }

    /// Checks tensor shapes against the config.
    pub fn check(&self, cfg: &EncoderConfig) -> Result<()> {
        let err = |what: &str, got: &[usize], want: &[usize]| {
            Err(Error::Config(format!(
                "encoder parameter {what} has shape {got:?}, config implies {want:?}"
            )))
        };
        match (&self.embedding_table, cfg.mode) {
            (Some(t), EncoderMode::Trainable) => {
                if t.shape() != [cfg.hash_buckets, cfg.embed_dim] {
                    return err(
                        EMBEDDING_TABLE,
                        t.shape(),
                        &[cfg.hash_buckets, cfg.embed_dim],
                    );
                }
            }
            (None, EncoderMode::External) => {}
            (Some(_), EncoderMode::External) => {
                return Err(Error::Config(
                    "external-mode encoder must not carry an embedding table".into(),
                ))
            }
            (None, EncoderMode::Trainable) => {
                return Err(Error::Config(
                    "trainable-mode encoder requires an embedding table".into(),
                ))
            }
        }
        if let Some(p) = &self.projection {
            if p.input_dim() != cfg.embed_dim || p.bias.shape() != [p.output_dim()] {
                return err(
                    PROJ_WEIGHT,
                    p.weight.shape(),
                    &[cfg.embed_dim, cfg.projection_dim],
                );
            }
        } else if cfg.mode == EncoderMode::External {
            return Err(Error::Config(
                "external-mode encoder requires a projection head".into(),
            ));
        }
        Ok(())
    }

    /// Named tensors, in a fixed order.
    pub fn named_tensors(&self) -> Vec<(&'static str, &Tensor)> {
        let mut out = Vec::new();
        if let Some(t) = &self.embedding_table {
            out.push((EMBEDDING_TABLE, t));
        }
        if let Some(p) = &self.projection {
            out.push((PROJ_WEIGHT, &p.weight));
            out.push((PROJ_BIAS, &p.bias));
        }
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        let mut out = Vec::new();
        if let Some(t) = &mut self.embedding_table {
            out.push((EMBEDDING_TABLE, t));
        }
        if let Some(p) = &mut self.projection {
            out.push((PROJ_WEIGHT, &mut p.weight));
            out.push((PROJ_BIAS, &mut p.bias));
        }
        out
    }

    pub fn from_named(mut tensors: BTreeMap<String, Tensor>) -> Result<Self> {
        let embedding_table = tensors.remove(EMBEDDING_TABLE);
        let projection = match (tensors.remove(PROJ_WEIGHT), tensors.remove(PROJ_BIAS)) {
            (Some(weight), Some(bias)) => Some(ProjectionHead { weight, bias }),
            (None, None) => None,
            _ => {
                return Err(Error::MalformedCheckpoint(
                    "projection weight and bias must come together".into(),
                ))
            }
        };
        Ok(Self {
            embedding_table,
            projection,
        })
    }

    /// Places every tensor on `tape`; `trainable` controls gradient flow.
    pub fn bind<'a>(&'a self, tape: &mut Tape<'a>, trainable: bool) -> BoundParams {
        let leaf = |tape: &mut Tape<'a>, t: &'a Tensor| {
            if trainable {
                tape.param(t)
            } else {
                tape.constant(t)
            }
        };
        BoundParams {
            table: self.embedding_table.as_ref().map(|t| leaf(tape, t)),
            proj: self
                .projection
                .as_ref()
                .map(|p| (leaf(tape, &p.weight), leaf(tape, &p.bias))),
        }
    }
}

/// Tape handles for one binding of [`EncoderParams`].
#[derive(Debug, Clone, Copy)]
pub struct BoundParams {
    pub table: Option<Var>,
    pub proj: Option<(Var, Var)>,
}

impl BoundParams {
    /// `(name, var)` for every bound tensor, matching
    /// [`EncoderParams::named_tensors`] order.
    pub fn named(&self) -> Vec<(&'static str, Var)> {
        let mut out = Vec::new();
        if let Some(t) = self.table {
            out.push((EMBEDDING_TABLE, t));
        }
        if let Some((w, b)) = self.proj {
            out.push((PROJ_WEIGHT, w));
            out.push((PROJ_BIAS, b));
        }
        out
    }

    fn project(&self, tape: &mut Tape<'_>, pooled: Var) -> Result<Var> {
        match self.proj {
            Some((w, b)) => {
                let h = tape.matmul(pooled, w)?;
                let h = tape.add_row(h, b)?;
                Ok(tape.tanh(h))
            }
            None => Ok(pooled),
        }
    }
}

/// Encodes texts on `tape`: mean of hashed n-gram embedding rows, then the
/// projection head when one is bound. Returns a `[batch × dim]` node.
pub fn encode(
    tape: &mut Tape<'_>,
    bound: &BoundParams,
    texts: &[&str],
    cfg: &EncoderConfig,
) -> Result<Var> {
    let bags = texts.iter().map(|t| cfg.features(t)).collect();
    encode_features(tape, bound, bags)
}

/// As [`encode`], from pre-computed feature bags.
pub fn encode_features(
    tape: &mut Tape<'_>,
    bound: &BoundParams,
    bags: Vec<Vec<usize>>,
) -> Result<Var> {
    let table = bound
        .table
        .ok_or_else(|| Error::Config("text encoding requires a trainable-mode encoder".into()))?;
    let pooled = tape.embedding_bag(table, bags)?;
    bound.project(tape, pooled)
}

/// Looks up frozen vectors in `store` and feeds them through the projection
/// head. The store vectors enter the tape as constants.
pub fn encode_external(
    tape: &mut Tape<'_>,
    bound: &BoundParams,
    ids: &[&str],
    store: &EmbeddingStore,
) -> Result<Var> {
    let rows = store.matrix(ids)?;
    let x = tape.leaf(rows, false);
    if bound.proj.is_none() {
        return Err(Error::Config(
            "external encoding requires a projection head".into(),
        ));
    }
    bound.project(tape, x)
}

/// Inference-side encoder: configuration, parameters and their fingerprint.
#[derive(Debug, Clone)]
pub struct Encoder {
    config: EncoderConfig,
    params: EncoderParams,
    fingerprint: String,
}

impl Encoder {
    pub fn new(config: EncoderConfig, params: EncoderParams) -> Result<Self> {
        config.validate()?;
        params.check(&config)?;
        let fingerprint = fingerprint(&config, &params);
        Ok(Self {
            config,
            params,
            fingerprint,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn params(&self) -> &EncoderParams {
        &self.params
    }

    pub fn into_parts(self) -> (EncoderConfig, EncoderParams) {
        (self.config, self.params)
    }

    /// Hex digest binding pools and exports to these exact parameters.
    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    pub fn output_dim(&self) -> usize {
        self.params.output_dim(&self.config)
    }

    pub fn encode_texts(&self, texts: &[&str]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, false);
        let out = encode(&mut tape, &bound, texts, &self.config)?;
        Ok(tape.tensor(out))
    }

    pub fn encode_ids(&self, ids: &[&str], store: &EmbeddingStore) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, false);
        let out = encode_external(&mut tape, &bound, ids, store)?;
        Ok(tape.tensor(out))
    }

    /// Encodes utterances by text (trainable mode) or by id (external).
    pub fn encode_utterances(
        &self,
        utts: &[crate::data::LabeledUtterance],
        store: Option<&EmbeddingStore>,
    ) -> Result<Tensor> {
        match (self.config.mode, store) {
            (EncoderMode::Trainable, _) => {
                let texts: Vec<&str> = utts.iter().map(|u| u.text.as_str()).collect();
                self.encode_texts(&texts)
            }
            (EncoderMode::External, Some(store)) => {
                let ids: Vec<&str> = utts.iter().map(|u| u.id.as_str()).collect();
                self.encode_ids(&ids, store)
            }
            (EncoderMode::External, None) => Err(Error::Config(
                "external-mode encoder needs an embedding store".into(),
            )),
        }
    }
}

/// SHA-256 over the config and the single-precision parameter bytes.
pub fn fingerprint(cfg: &EncoderConfig, params: &EncoderParams) -> String {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(cfg).expect("config serializes"));
    for (name, t) in params.named_tensors() {
        h.update(name.as_bytes());
        for &d in t.shape() {
            h.update((d as u64).to_le_bytes());
        }
        let mut buf = Vec::with_capacity(t.len() * 4);
        for &v in t.data() {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
        h.update(&buf);
    }
    hex::encode(&h.finalize()[..16])
}

/// Fixed-dimension vectors keyed by utterance id.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct EmbeddingStore {
    dim: usize,
    vectors: BTreeMap<String, Vec<f64>>,
}

impl EmbeddingStore {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            vectors: BTreeMap::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn insert(&mut self, id: impl Into<String>, v: Vec<f64>) -> Result<()> {
        let id = id.into();
        if v.len() != self.dim {
            return Err(Error::ShapeMismatch {
                op: "EmbeddingStore::insert",
                left: vec![self.dim],
                right: vec![v.len()],
            });
        }
        if v.iter().all(|&x| x == 0.0) {
            return Err(Error::DegenerateVector("EmbeddingStore::insert"));
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::Config(format!("vector for `{id}` is not finite")));
        }
        self.vectors.insert(id, v);
        Ok(())
    }

    pub fn get(&self, id: &str) -> Result<&[f64]> {
        self.vectors
            .get(id)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::MissingId(id.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[f64])> {
        self.vectors.iter().map(|(k, v)| (k.as_str(), v.as_slice()))
    }

    /// Stacks the vectors of `ids` into a `[len × dim]` tensor.
    pub fn matrix(&self, ids: &[&str]) -> Result<Tensor> {
        let mut data = Vec::with_capacity(ids.len() * self.dim);
        for id in ids {
            data.extend_from_slice(self.get(id)?);
        }
        Tensor::matrix(ids.len(), self.dim, data)
    }

    /// Reads the `#dim=<d>` TSV format. Other `#` lines are ignored.
    pub fn read_tsv(path: &Path) -> Result<Self> {
        let reader = BufReader::new(File::open(path)?);
        let perr = |line: usize, msg: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            msg,
        };
        let mut store: Option<Self> = None;
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            let lineno = i + 1;
            if let Some(rest) = line.strip_prefix('#') {
                if let Some(d) = rest.strip_prefix("dim=") {
                    let dim = d
                        .trim()
                        .parse()
                        .map_err(|e| perr(lineno, format!("bad dim: {e}")))?;
                    store = Some(Self::new(dim));
                }
                continue;
            }
            if line.trim().is_empty() {
                continue;
            }
            let store = store
                .as_mut()
                .ok_or_else(|| perr(lineno, "missing #dim= header".into()))?;
            let (id, vals) = line
                .split_once('\t')
                .ok_or_else(|| perr(lineno, "expected id<TAB>values".into()))?;
            let v = vals
                .split(' ')
                .filter(|s| !s.is_empty())
                .map(str::parse::<f64>)
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| perr(lineno, format!("bad float: {e}")))?;
            store
                .insert(id, v)
                .map_err(|e| perr(lineno, e.to_string()))?;
        }
        store.ok_or_else(|| perr(0, "missing #dim= header".into()))
    }

    pub fn write_tsv(&self, path: &Path) -> Result<()> {
        write_vectors_tsv(
            path,
            self.dim,
            self.vectors.iter().map(|(k, v)| (k.as_str(), v.as_slice())),
        )
    }
}

/// Writes rows in the store TSV format, values as shortest-roundtrip f32.
pub fn write_vectors_tsv<'a>(
    path: &Path,
    dim: usize,
    rows: impl IntoIterator<Item = (&'a str, &'a [f64])>,
) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "#dim={dim}")?;
    for (id, v) in rows {
        write!(w, "{id}\t")?;
        for (i, x) in v.iter().enumerate() {
            if i > 0 {
                w.write_all(b" ")?;
            }
            write!(w, "{}", *x as f32)?;
        }
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> EncoderConfig {
        EncoderConfig {
            embed_dim: 4,
            hash_buckets: 97,
            projection_dim: 3,
            ..EncoderConfig::default()
        }
    }

    #[test]
    fn tokenize_rules() {
        assert_eq!(
            tokenize("Card NOT working!", 48),
            ["card", "not", "working"]
        );
        assert!(tokenize("", 48).is_empty());
        assert_eq!(
            tokenize("  \"hello,\"  ...  wo-rld\u{00a0}x", 48),
            ["hello", "wo-rld", "x"]
        );
        let long: Vec<String> = (0..60).map(|i| format!("w{i}")).collect();
        let toks = tokenize(&long.join(" "), 48);
        assert_eq!(toks.len(), 48);
        assert_eq!(toks[..], long[..48]);
    }

    #[test]
    fn fnv_reference_values() {
        assert_eq!(fnv1a64(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a64(b"a"), 0xaf63dc4c8601ec8c);
        assert_eq!(fnv1a64(b"foobar"), 0x85944171f73967e8);
    }

    #[test]
    fn featurize_counts() {
        let cfg = small_cfg();
        assert!(featurize(&[], &cfg).is_empty());
        assert_eq!(featurize(&["a".into()], &cfg).len(), 1);
        let uni = EncoderConfig {
            ngram_orders: BTreeSet::from([1]),
            ..small_cfg()
        };
        let ids = featurize(&["a".into(), "b".into(), "a".into()], &uni);
        let a = (fnv1a64(b"a") % 97) as usize;
        assert_eq!(ids.iter().filter(|&&i| i == a).count(), 2);
        let both = featurize(&["a".into(), "b".into(), "a".into()], &cfg);
        assert_eq!(both.len(), 5);
        assert_eq!(both[3], (fnv1a64(b"a b") % 97) as usize);
    }

    #[test]
    fn single_feature_without_projection_is_table_row() {
        let cfg = EncoderConfig {
            ngram_orders: BTreeSet::from([1]),
            ..small_cfg()
        };
        let params = EncoderParams::init(&cfg, 3).unwrap();
        let enc = Encoder::new(cfg.clone(), params).unwrap();
        let out = enc.encode_texts(&["hello"]).unwrap();
        let f = cfg.features("hello")[0];
        assert_eq!(
            out.row(0),
            enc.params().embedding_table.as_ref().unwrap().row(f)
        );
    }

    #[test]
    fn three_feature_text_against_hand_computation() {
        let cfg = small_cfg();
        let mut params = EncoderParams::init(&cfg, 9).unwrap();
        params.ensure_projection(&cfg, 9);
        let enc = Encoder::new(cfg.clone(), params).unwrap();
        // "x y" has features x, y and the bigram "x y".
        let feats = cfg.features("x y");
        assert_eq!(feats.len(), 3);
        let table = enc.params().embedding_table.as_ref().unwrap();
        let head = enc.params().projection.as_ref().unwrap();
        let mut pooled = [0.0; 4];
        for &f in &feats {
            for k in 0..4 {
                pooled[k] += table.row(f)[k] / 3.0;
            }
        }
        let out = enc.encode_texts(&["x y"]).unwrap();
        for j in 0..3 {
            let mut z = head.bias.data()[j];
            for k in 0..4 {
                z += pooled[k] * head.weight.data()[k * 3 + j];
            }
            assert!((out.row(0)[j] - z.tanh()).abs() < 1e-14);
        }
    }

    #[test]
    fn zero_feature_text_encodes_to_projection_of_zero() {
        let cfg = small_cfg();
        let mut params = EncoderParams::init(&cfg, 1).unwrap();
        params.ensure_projection(&cfg, 1);
        params.projection.as_mut().unwrap().bias = Tensor::vector(vec![0.5, -0.5, 0.0]).unwrap();
        let enc = Encoder::new(cfg, params).unwrap();
        let out = enc.encode_texts(&["!!! ..."]).unwrap();
        assert_eq!(out.row(0), &[0.5f64.tanh(), (-0.5f64).tanh(), 0.0]);
    }

    #[test]
    fn external_identity_projection_is_tanh() {
        let cfg = EncoderConfig {
            mode: EncoderMode::External,
            embed_dim: 3,
            projection_dim: 3,
            ..EncoderConfig::default()
        };
        let mut params = EncoderParams::init(&cfg, 0).unwrap();
        params.projection.as_mut().unwrap().weight =
            Tensor::matrix(3, 3, vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
        let mut store = EmbeddingStore::new(3);
        store.insert("u1", vec![0.5, -1.0, 2.0]).unwrap();
        let enc = Encoder::new(cfg, params).unwrap();
        let out = enc.encode_ids(&["u1", "u1"], &store).unwrap();
        assert_eq!(
            out.row(0),
            &[0.5f64.tanh(), (-1.0f64).tanh(), 2.0f64.tanh()]
        );
        assert_eq!(out.row(0), out.row(1));
        match enc.encode_ids(&["nope"], &store) {
            Err(Error::MissingId(id)) => assert_eq!(id, "nope"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn params_must_match_config() {
        let cfg = small_cfg();
        let params = EncoderParams::init(&cfg, 0).unwrap();
        let other = EncoderConfig {
            embed_dim: 5,
            ..small_cfg()
        };
        assert!(Encoder::new(other, params).is_err());
    }

    #[test]
    fn store_tsv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("store.tsv");
        let mut s = EmbeddingStore::new(2);
        s.insert("a", vec![0.25, -1.5]).unwrap();
        s.insert("b", vec![3.0, 1e-3]).unwrap();
        s.write_tsv(&p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("#dim=2\n"));
        let back = EmbeddingStore::read_tsv(&p).unwrap();
        assert_eq!(back.get("a").unwrap(), &[0.25, -1.5]);
        assert_eq!(back.get("b").unwrap()[1], 1e-3);
        assert!(s.insert("z", vec![0.0, 0.0]).is_err());
        assert!(s.insert("z", vec![1.0]).is_err());
    }

    #[test]
    fn fingerprint_tracks_parameters() {
        let cfg = small_cfg();
        let params = EncoderParams::init(&cfg, 0).unwrap();
        let a = Encoder::new(cfg.clone(), params.clone()).unwrap();
        let mut changed = params;
        changed.embedding_table.as_mut().unwrap().data_mut()[0] += 0.5;
        let b = Encoder::new(cfg, changed).unwrap();
        assert_ne!(a.fingerprint(), b.fingerprint());
        assert_eq!(a.fingerprint().len(), 32);
    }
}
