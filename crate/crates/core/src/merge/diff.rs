use rayon::prelude::*;
use serde::Serialize;

use super::align::{require_structural, SkipPatterns};
use super::task_vector::{load_f32, ChunkBuffers};
use crate::container::CheckpointHandle;
use crate::exec::{chunk_ranges, ExecOptions};
use crate::Result;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TensorDiff {
    pub name: String,
    pub elements: u64,
    pub max_abs_diff: f32,
    /// L2 norm of `a - b`, accumulated in f32 in offset order.
    pub l2_norm: f32,
    /// Elements whose values differ (two NaNs count as equal, as do ±0).
    pub differing: u64,
}

/// Per-tensor difference statistics between two aligned checkpoints.
pub fn diff_report(a: &CheckpointHandle, b: &CheckpointHandle, exec: &ExecOptions) -> Result<Vec<TensorDiff>> {
    exec.validate()?;
    require_structural(&[a, b], &SkipPatterns::default())?;
    let names: Vec<&str> = a.names().collect();
    let chunk = exec.chunk_elements();
    exec.pool()?.install(|| {
        names
            .par_iter()
            .map(|&name| {
                let n = a.meta(name)?.element_count() as usize;
                let mut bufs = ChunkBuffers::default();
                let (mut max_abs, mut sum_sq, mut differing) = (0f32, 0f32, 0u64);
                for (start, count) in chunk_ranges(n, chunk) {
                    load_f32(a, name, start, count, &mut bufs.raw, &mut bufs.a)?;
                    load_f32(b, name, start, count, &mut bufs.raw, &mut bufs.b)?;
                    for (&x, &y) in bufs.a.iter().zip(&bufs.b) {
                        if x == y || (x.is_nan() && y.is_nan()) {
                            continue;
                        }
                        differing += 1;
                        let d = x - y;
                        max_abs = max_abs.max(d.abs());
                        sum_sq += d * d;
                    }
                }
                Ok(TensorDiff {
                    name: name.to_string(),
                    elements: n as u64,
                    max_abs_diff: max_abs,
                    l2_norm: sum_sq.sqrt(),
                    differing,
                })
            })
            .collect()
    })
}
