use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("shape {shape:?} does not describe {len} values")]
    InvalidShape { shape: Vec<usize>, len: usize },

    #[error("zero-norm vector passed to {0}")]
    DegenerateVector(&'static str),

    #[error("empty input to {0}")]
    EmptyInput(&'static str),

    #[error("backward root must be a scalar, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),

    #[error("unknown elementwise kind `{0}`")]
    UnknownKind(String),

    #[error("{op} expects {expected} input(s), got {got}")]
    Arity {
        op: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("class `{0}` has a single utterance, no positive pair can be formed")]
    SingletonClass(String),

    #[error(
        "cannot sample {requested} negatives for class `{label}`: only {available} out-of-class utterances"
    )]
    NegativeSampling {
        label: String,
        requested: usize,
        available: usize,
    },

    #[error("class `{label}` has {available} examples but {requested} were requested")]
    UndersizedClass {
        label: String,
        requested: usize,
        available: usize,
    },

    #[error("duplicate utterance id `{0}`")]
    DuplicateId(String),

    #[error("utterance `{0}` encodes to a zero vector")]
    ZeroEmbedding(String),

    #[error("unknown utterance id `{0}`")]
    MissingId(String),

    #[error("non-finite gradient in tensor `{name}` at index {index}")]
    NonFiniteGradient { name: String, index: usize },

    #[error("non-finite loss at step {0}")]
    NonFiniteLoss(usize),

    #[error("not a checkpoint file (bad magic)")]
    BadMagic,

    #[error("checkpoint version mismatch: file has {found}, reader expects {expected}")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("checkpoint truncated: {0}")]
    Truncated(String),

    #[error("checkpoint checksum mismatch: stored {stored:08x}, computed {computed:08x}")]
    Checksum { stored: u32, computed: u32 },

    #[error("malformed checkpoint: {0}")]
    MalformedCheckpoint(String),

    #[error("encoder fingerprint mismatch: pool built with {pool}, query encoder is {encoder}")]
    FingerprintMismatch { pool: String, encoder: String },

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("synthetic generation failed: {0}")]
    Synthetic(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
