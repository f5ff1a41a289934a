//! Safetensors-style checkpoint storage.
//!
//! A shard is an 8-byte little-endian header length `N`, `N` bytes of JSON
//! describing each tensor (`dtype`, `shape`, `data_offsets`), then the data
//! section. Sharded checkpoints add `model.safetensors.index.json` with a
//! `weight_map` from tensor name to shard filename.

mod handle;
mod header;
pub(crate) mod io;
mod verify;
mod writer;

pub use handle::{CheckpointHandle, OpenOptions, TensorView};
pub use header::{parse_shard_header, ShardHeader, TensorMeta, MAX_HEADER_BYTES};
pub use verify::{verify_checkpoint, VerifySummary};
pub use writer::{
    write_checkpoint, CheckpointWriter, PendingTensor, ShardPolicy, TensorData, TensorSpec,
    DEFAULT_MAX_SHARD_BYTES, INDEX_FILE, SINGLE_FILE,
};
