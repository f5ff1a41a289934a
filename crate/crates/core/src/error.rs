use std::path::PathBuf;

use crate::dtype::DType;
use crate::merge::AlignmentReport;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("truncated shard: header declares {declared} bytes but only {available} are present")]
    Truncated { declared: u64, available: u64 },

    #[error("malformed header: {0}")]
    MalformedHeader(String),

    #[error("unknown dtype {0:?}")]
    UnknownDType(String),

    #[error("tensors {first:?} and {second:?} have overlapping byte ranges")]
    OverlappingRanges { first: String, second: String },

    #[error("tensor {name:?} ends at byte {end} past the data section length {data_len}")]
    OutOfBounds { name: String, end: u64, data_len: u64 },

    #[error("tensor {0:?} not found")]
    MissingTensor(String),

    #[error("index maps {tensor:?} to {shard:?}, which does not contain it")]
    DanglingIndexEntry { tensor: String, shard: String },

    #[error("tensor {name:?} appears in both {first:?} and {second:?}")]
    DuplicateTensor {
        name: String,
        first: String,
        second: String,
    },

    #[error("tensor {name:?} in {shard:?} is not referenced by the index")]
    UnusedTensor { name: String, shard: String },

    #[error("index metadata total_size {declared} does not match the {actual} tensor bytes present")]
    TotalSizeMismatch { declared: u64, actual: u64 },

    #[error("no checkpoint found at {0}")]
    NoCheckpoint(PathBuf),

    #[error("tensor {name:?} is {bytes} bytes, larger than the shard limit of {limit}")]
    TensorLargerThanShardLimit { name: String, bytes: u64, limit: u64 },

    #[error("checkpoints are misaligned: {0}")]
    MisalignedCheckpoints(Box<AlignmentReport>),

    #[error("tensor {name:?} has conflicting dtypes {dtypes:?}")]
    DTypeConflict { name: String, dtypes: Vec<DType> },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("no entry has a defined cosine")]
    NoDefinedEntries,

    #[error("task {0:?} has no predictions")]
    EmptyPredictions(String),

    #[error("task {task:?} is scored as {expected} but holds {found} items")]
    KindMismatch {
        task: String,
        expected: &'static str,
        found: &'static str,
    },

    #[error("weights name task {0:?}, which was not scored")]
    UnknownTaskInWeights(String),

    #[error("line {line}: {message}")]
    MalformedRecord { line: usize, message: String },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
