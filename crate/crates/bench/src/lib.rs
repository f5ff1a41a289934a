//! Synthetic checkpoints for the benchmarks.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tvmerge_core::{write_checkpoint, CheckpointHandle, DType, PendingTensor, ShardPolicy, TensorData};

/// Writes `tensors` tensors of `elements` values each, drawn uniformly from
/// `[-1, 1)` plus `offset`, named like transformer blocks.
pub fn synthetic_checkpoint(
    dir: &Path,
    tensors: usize,
    elements: usize,
    dtype: DType,
    seed: u64,
    offset: f32,
) -> CheckpointHandle {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pending = (0..tensors).map(|i| PendingTensor {
        name: format!("model.layers.{i}.mlp.weight"),
        dtype,
        shape: vec![elements as u64],
        data: TensorData::F32((0..elements).map(|_| rng.gen_range(-1.0f32..1.0) + offset).collect()),
    });
    write_checkpoint(pending.collect::<Vec<_>>(), dir, &ShardPolicy::default()).expect("write synthetic checkpoint")
}
