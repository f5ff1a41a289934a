use std::path::Path;

use super::handle::{CheckpointHandle, OpenOptions};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VerifySummary {
    pub shards: usize,
    pub tensors: usize,
    pub parameters: u64,
    pub bytes: u64,
}

/// Full strict validation: every shard header (schema, dtypes, ranges,
/// bounds), index entries resolving to shards that hold them, no tensor in
/// two shards, no unindexed tensors, and the index `total_size` when declared.
///
/// The error names the first check that failed.
pub fn verify_checkpoint(path: impl AsRef<Path>) -> Result<VerifySummary> {
    let handle = CheckpointHandle::open_with(path, OpenOptions { lenient: false })?;
    let bytes = handle.total_bytes();
    if let Some(declared) = handle.index_total_size() {
        if declared != bytes {
            return Err(Error::TotalSizeMismatch {
                declared,
                actual: bytes,
            });
        }
    }
    Ok(VerifySummary {
        shards: handle.shard_paths().len(),
        tensors: handle.len(),
        parameters: handle.total_parameter_count(),
        bytes,
    })
}
