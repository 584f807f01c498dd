//! Desk-scale laboratory for early-exit classification.
//!
//! The crate trains small multi-exit feed-forward classifiers on synthetic
//! Gaussian tasks and studies when per-sample computation can stop early.
//! Every backbone layer carries its own softmax head; layers below the top
//! also carry a projection into a metric space where per-class prototypes
//! are maintained as sliding averages. At inference time a sample walks up
//! the stack until an exit policy fires, fusing the head's normalized
//! entropy with the ratio of prototype distances.
//!
//! Conventions used throughout the public API:
//!
//! * layer numbers are 1-based (`1..=M`, with `M` the top layer),
//! * class labels are 0-based (`0..K`),
//! * all arithmetic is `f64`, and training is bit-reproducible for a fixed
//!   seed (same config twice gives byte-identical checkpoints and reports).
//!
//! The `parallel` feature (on by default) runs batch inference and
//! threshold sweeps on a rayon pool; disabling it falls back to plain
//! sequential loops with identical results.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod exiting;
pub mod harness;
mod linalg;
pub mod metrics;
pub mod model;
mod parallel;
pub mod prototypes;
pub mod svg;
pub mod training;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointError};
pub use config::{
    config_hash, load_config, write_config_echo, ConfigError, DataSource, ExperimentConfig,
    PolicyTemplate,
};
pub use data::{
    generate, hash_text, load_dataset, load_text_csv, save_dataset, DataError, Dataset,
    DatasetSpec, Sample, Splits,
};
pub use exiting::{
    infer_batch, infer_one, write_traces_jsonl, ExitError, ExitPolicy, InferenceResult, LayerEval,
};
pub use harness::{
    correctness_estimation, default_tau_grid, evaluate_policy, indicator_spearman, match_speedup,
    pearson, spearman, spearman_homogeneity, speedup_ratio, sweep, EstimationAccuracy, FlopsModel,
    HarnessError, PolicyEval, SweepResult, SweepRow,
};
pub use metrics::{
    cosine_distance, distance_ratio, edr, normalized_entropy, DistancePair, MetricsError,
    ProbDist, NORM_EPS, PROB_EPS,
};
pub use model::{
    Activation, Affine, Backprop, LayerOutput, Model, ModelConfig, ModelError, ParameterSet,
    ProtoSpace, TensorKind,
};
pub use prototypes::{
    adjust_prototypes_kmeans, dar_alienation, dar_center, dar_combined, DarConfig, DarOutput,
    DarVariant, ProtoError, PrototypeBank,
};
pub use training::{
    accuracy, layer_loss, linear_lr, total_loss, train, AdamW, LabeledSet, StepRecord,
    TrainConfig, TrainError, TrainOutcome, TrainReport, Trainer,
};
