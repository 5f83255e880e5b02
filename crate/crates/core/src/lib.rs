#![allow(
    clippy::neg_cmp_op_on_partial_ord,
    clippy::needless_range_loop,
    clippy::type_complexity
)]

pub mod baseline;
pub mod checkpoint;
pub mod data;
pub mod encoder;
pub mod error;
pub mod inference;
pub mod losses;
pub mod metrics;
pub mod optim;
pub mod pairing;
pub mod pipeline;
pub mod rng;
pub mod synthetic;
pub mod tensor;
pub mod trainer;

pub use baseline::{mlp_predict, train_mlp, MlpConfig, MlpParams};
pub use checkpoint::{Checkpoint, TrainingMetadata};
pub use data::{LabeledUtterance, ResponsePair};
pub use encoder::{EmbeddingStore, Encoder, EncoderConfig, EncoderMode, EncoderParams};
pub use error::{Error, Result};
pub use inference::{ExemplarPool, Prediction};
pub use losses::{LossConfig, LossKind, MnegForm};
pub use metrics::{accuracy, evaluate_runs, silhouette, Distance, EvalReport};
pub use optim::{AdamState, OptimConfig};
pub use pairing::PairSet;
pub use pipeline::{run_pipeline, ExperimentConfig, NShot};
pub use synthetic::{generate_synthetic, SyntheticData, SyntheticSpec};
pub use tensor::{Tape, Tensor, Var};
pub use trainer::{train_stage1, train_stage2, Stage2Options, TrainOutcome};
