use std::path::Path;

use rayon::prelude::*;

use super::align::{require_structural, SkipPatterns};
use crate::container::{CheckpointHandle, CheckpointWriter, ShardPolicy, TensorSpec};
use crate::dtype::{decode_into, encode_into, DType};
use crate::exec::{chunk_ranges, ExecOptions};
use crate::Result;

/// Scratch space for streaming one chunk.
#[derive(Default)]
pub(crate) struct ChunkBuffers {
    pub raw: Vec<u8>,
    pub a: Vec<f32>,
    pub b: Vec<f32>,
}

/// Reads and widens `count` elements of `name` starting at `start`, replacing `out`.
pub(crate) fn load_f32(
    handle: &CheckpointHandle,
    name: &str,
    start: usize,
    count: usize,
    raw: &mut Vec<u8>,
    out: &mut Vec<f32>,
) -> Result<()> {
    let dtype = handle.meta(name)?.dtype;
    handle.read_elements_into(name, start, count, raw)?;
    out.clear();
    decode_into(raw, dtype, out);
    Ok(())
}

/// `target - base`, tensor by tensor, computed on demand in 32-bit precision.
///
/// The stored dtypes of the two sides may differ; both are widened before
/// subtracting.
#[derive(Debug)]
pub struct TaskVector<'a> {
    target: &'a CheckpointHandle,
    base: &'a CheckpointHandle,
    names: Vec<String>,
}

impl<'a> TaskVector<'a> {
    /// Errors with `MisalignedCheckpoints` unless both sides share names and shapes.
    pub fn new(target: &'a CheckpointHandle, base: &'a CheckpointHandle) -> Result<Self> {
        require_structural(&[target, base], &SkipPatterns::default())?;
        Ok(Self {
            target,
            base,
            names: target.names().map(str::to_string).collect(),
        })
    }

    pub fn target(&self) -> &CheckpointHandle {
        self.target
    }

    pub fn base(&self) -> &CheckpointHandle {
        self.base
    }

    /// Tensor names in lexicographic order.
    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn shape(&self, name: &str) -> Result<&[u64]> {
        Ok(&self.target.meta(name)?.shape)
    }

    pub fn element_count(&self, name: &str) -> Result<usize> {
        Ok(self.target.meta(name)?.element_count() as usize)
    }

    /// Difference for elements `start..start + count`, written into `out`.
    pub(crate) fn chunk_into(
        &self,
        name: &str,
        start: usize,
        count: usize,
        bufs: &mut ChunkBuffers,
        out: &mut Vec<f32>,
    ) -> Result<()> {
        load_f32(self.target, name, start, count, &mut bufs.raw, out)?;
        load_f32(self.base, name, start, count, &mut bufs.raw, &mut bufs.b)?;
        for (t, b) in out.iter_mut().zip(&bufs.b) {
            *t -= b;
        }
        Ok(())
    }

    /// Calls `f(start, values)` for consecutive chunks of one tensor, in offset order.
    pub fn for_each_chunk(
        &self,
        name: &str,
        chunk_elements: usize,
        mut f: impl FnMut(usize, &[f32]) -> Result<()>,
    ) -> Result<()> {
        let mut bufs = ChunkBuffers::default();
        let mut out = Vec::new();
        for (start, count) in chunk_ranges(self.element_count(name)?, chunk_elements) {
            self.chunk_into(name, start, count, &mut bufs, &mut out)?;
            f(start, &out)?;
        }
        Ok(())
    }

    /// The whole difference tensor, materialized.
    pub fn tensor(&self, name: &str) -> Result<Vec<f32>> {
        let n = self.element_count(name)?;
        let mut out = Vec::new();
        self.chunk_into(name, 0, n, &mut ChunkBuffers::default(), &mut out)?;
        Ok(out)
    }
}

/// Writes the task vector as a checkpoint of `dtype` tensors.
pub fn export_task_vector(
    tv: &TaskVector<'_>,
    out_dir: impl AsRef<Path>,
    dtype: DType,
    exec: &ExecOptions,
    policy: &ShardPolicy,
) -> Result<CheckpointHandle> {
    exec.validate()?;
    let specs = tv
        .names()
        .iter()
        .map(|n| {
            Ok(TensorSpec {
                name: n.clone(),
                dtype,
                shape: tv.shape(n)?.to_vec(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let writer = CheckpointWriter::create(out_dir.as_ref(), &specs, policy)?;
    let chunk = exec.chunk_elements();
    let mut items = Vec::new();
    for n in tv.names() {
        for (start, count) in chunk_ranges(tv.element_count(n)?, chunk) {
            items.push((n.as_str(), start, count));
        }
    }
    exec.pool()?.install(|| {
        items.par_iter().try_for_each(|&(name, start, count)| {
            let mut bufs = ChunkBuffers::default();
            let mut diff = Vec::new();
            tv.chunk_into(name, start, count, &mut bufs, &mut diff)?;
            bufs.raw.clear();
            encode_into(&diff, dtype, &mut bufs.raw);
            writer.write_at(name, (start * dtype.bytes_per_element()) as u64, &bufs.raw)
        })
    })?;
    writer.finish()
}
