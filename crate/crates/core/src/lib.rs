//! Task-arithmetic merging of transformer checkpoints.
//!
//! The crate reads and writes safetensors-style checkpoints (single file or
//! sharded with a weight-map index), builds a domain-specific instruction
//! model from three checkpoints as `domain + (instruct - base)`, measures how
//! independent the two task vectors are with per-tensor cosine similarity,
//! and reproduces benchmark score arithmetic (accuracy ± standard error,
//! micro-F1, aggregation).
//!
//! Module map:
//!
//! - [`dtype`]: `F32`/`F16`/`BF16` element codecs to and from 32-bit working precision.
//! - [`container`]: shard header parsing, checkpoint handles, the shard writer, strict verification.
//! - [`merge`]: alignment checks, task vectors, the streaming linear merge, diff reports.
//! - [`diagnostics`]: cosine similarity per tensor, layer-type grouping, summaries and report emitters.
//! - [`scoring`]: accuracy/F1 scoring and table-style aggregation.

pub mod container;
pub mod diagnostics;
pub mod dtype;
mod error;
pub(crate) mod exec;
pub mod merge;
pub mod scoring;

pub use container::{
    parse_shard_header, verify_checkpoint, write_checkpoint, CheckpointHandle, CheckpointWriter,
    OpenOptions, PendingTensor, ShardHeader, ShardPolicy, TensorData, TensorMeta, TensorSpec,
    TensorView, VerifySummary,
};
pub use diagnostics::{
    CosineAccumulator, GroupSummary,
    cosine_per_tensor, emit_report, layer_type_of, summarize, ReportFormat, SimilarityEntry,
    SimilarityReport, Stats,
};
pub use dtype::{decode_f32, encode_from_f32, DType};
pub use error::{Error, Result};
pub use exec::ExecOptions;
pub use merge::{
    diff_report, export_task_vector, merge_linear, validate_alignment, AlignmentReport,
    MergeOutcome, MergeRecipe, OutputDType, SkipPatterns, TaskVector, TensorDiff, TensorMergeStat,
    Verdict,
};
pub use scoring::{
    aggregate, parse_gold, parse_predictions, score, score_accuracy, score_f1, Aggregation, Answer,
    Metric, Overall, PredictionItem, PredictionKind, ScoreReport, TaskPredictions, TaskScore,
};
