//! Task arithmetic over checkpoints.
//!
//! Given a general pretrained model (`base`), its instruction-tuned variant
//! (`instruct`) and a domain-adapted continual-pretraining of the same base
//! (`domain`), the merge produces a domain model that follows instructions:
//!
//! ```text
//! merged = domain + (instruct - base)
//! ```
//!
//! i.e. the instruction task vector is added onto the domain checkpoint.

mod align;
mod diff;
mod task_vector;

use std::path::Path;

use rayon::prelude::*;

pub use align::{validate_alignment, AlignmentReport, DTypeMismatch, ShapeMismatch, SkipPatterns, Verdict};
pub use diff::{diff_report, TensorDiff};
pub use task_vector::{export_task_vector, TaskVector};

use crate::container::{CheckpointHandle, CheckpointWriter, ShardPolicy, TensorSpec};
use crate::dtype::{encode_into, DType};
use crate::exec::{chunk_ranges, ExecOptions, DEFAULT_CHUNK_BYTES};
use crate::{Error, Result};
use task_vector::load_f32;

/// How the merged tensors are stored.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum OutputDType {
    /// Keep each tensor's dtype from the domain checkpoint. All three inputs must agree.
    #[default]
    InheritFromDomain,
    /// Store every merged tensor as this dtype; inputs may differ in dtype.
    Explicit(DType),
}

/// Inputs and policy for [`merge_linear`].
#[derive(Debug)]
pub struct MergeRecipe {
    pub base: CheckpointHandle,
    pub instruct: CheckpointHandle,
    pub domain: CheckpointHandle,
    pub lambda_domain: f32,
    pub lambda_instruct: f32,
    pub output_dtype: OutputDType,
    /// Tensors copied verbatim from `domain` instead of merged.
    pub skip: SkipPatterns,
    /// Bytes of 32-bit working values per input per chunk.
    pub chunk_bytes: usize,
    pub shard_policy: ShardPolicy,
}

impl MergeRecipe {
    /// Plain task arithmetic: both coefficients 1, nothing skipped.
    pub fn new(base: CheckpointHandle, instruct: CheckpointHandle, domain: CheckpointHandle) -> Self {
        Self {
            base,
            instruct,
            domain,
            lambda_domain: 1.0,
            lambda_instruct: 1.0,
            output_dtype: OutputDType::default(),
            skip: SkipPatterns::default(),
            chunk_bytes: DEFAULT_CHUNK_BYTES,
            shard_policy: ShardPolicy::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.lambda_domain.is_finite() || !self.lambda_instruct.is_finite() {
            return Err(Error::InvalidArgument("merge coefficients must be finite".into()));
        }
        if self.chunk_bytes == 0 {
            return Err(Error::InvalidArgument("chunk_bytes must be positive".into()));
        }
        Ok(())
    }

    /// Checks names, shapes and (unless an explicit output dtype is set) dtypes.
    pub fn check_alignment(&self) -> Result<AlignmentReport> {
        let report = align::require_structural(&[&self.base, &self.instruct, &self.domain], &self.skip)?;
        if self.output_dtype == OutputDType::InheritFromDomain {
            if let Some(m) = report.dtype_mismatches.first() {
                return Err(Error::DTypeConflict {
                    name: m.name.clone(),
                    dtypes: m.dtypes.clone(),
                });
            }
        }
        Ok(report)
    }
}

/// One merged element, in the fixed evaluation order
///
/// ```text
/// domain + λ_inst·(instruct − base) + (λ_dom − 1)·(domain − base)
/// ```
///
/// which is `base + λ_dom·(domain − base) + λ_inst·(instruct − base)`
/// rearranged around the domain weights. With `λ_dom == 1` the last term is
/// identically zero and is not evaluated, so default coefficients compute
/// exactly `domain + (instruct − base)`: an instruct equal to base then
/// reproduces the domain value, and infinities in `domain − base` cannot leak
/// in through `0·∞`.
#[inline]
pub fn merge_element(domain: f32, instruct: f32, base: f32, lambda_domain: f32, lambda_instruct: f32) -> f32 {
    let out = domain + lambda_instruct * (instruct - base);
    if lambda_domain == 1.0 {
        out
    } else {
        out + (lambda_domain - 1.0) * (domain - base)
    }
}

/// Per-tensor record of a merge run.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorMergeStat {
    pub name: String,
    pub dtype: DType,
    pub skipped: bool,
    /// Input elements (over all three checkpoints) that were NaN or infinite.
    pub non_finite_inputs: u64,
}

#[derive(Debug)]
pub struct MergeOutcome {
    pub handle: CheckpointHandle,
    pub alignment: AlignmentReport,
    pub tensors: Vec<TensorMergeStat>,
}

struct Job<'a> {
    tensor: usize,
    name: &'a str,
    start: usize,
    count: usize,
}

/// Streams `domain + λ_inst·(instruct − base) [+ (λ_dom − 1)·(domain − base)]`
/// into a new checkpoint under `out_dir`.
///
/// Tensors are processed in chunks of `recipe.chunk_bytes` across `threads`
/// workers (0 = available parallelism). Every output byte range is written by
/// exactly one chunk, so the output is byte-identical for any thread count
/// and chunk size. NaN and infinity propagate; they are counted per tensor and
/// logged.
pub fn merge_linear(recipe: &MergeRecipe, out_dir: impl AsRef<Path>, threads: usize) -> Result<MergeOutcome> {
    recipe.validate()?;
    let alignment = recipe.check_alignment()?;
    let exec = ExecOptions {
        threads,
        chunk_bytes: recipe.chunk_bytes,
    };

    let names: Vec<&str> = recipe.domain.names().collect();
    let mut stats = Vec::with_capacity(names.len());
    let mut specs = Vec::with_capacity(names.len());
    for &name in &names {
        let meta = recipe.domain.meta(name)?;
        let skipped = recipe.skip.matches(name);
        let dtype = match recipe.output_dtype {
            OutputDType::Explicit(d) if !skipped => d,
            _ => meta.dtype,
        };
        specs.push(TensorSpec {
            name: name.to_string(),
            dtype,
            shape: meta.shape.clone(),
        });
        stats.push(TensorMergeStat {
            name: name.to_string(),
            dtype,
            skipped,
            non_finite_inputs: 0,
        });
    }

    let writer = CheckpointWriter::create(out_dir.as_ref(), &specs, &recipe.shard_policy)?;
    let chunk = exec.chunk_elements();
    let mut jobs = Vec::new();
    for (tensor, spec) in specs.iter().enumerate() {
        let n = spec.shape.iter().product::<u64>() as usize;
        for (start, count) in chunk_ranges(n, chunk) {
            jobs.push(Job {
                tensor,
                name: &spec.name,
                start,
                count,
            });
        }
    }

    let counts: Vec<u64> = exec.pool()?.install(|| {
        jobs.par_iter()
            .map(|job| {
                let out_dtype = specs[job.tensor].dtype;
                if stats[job.tensor].skipped {
                    copy_chunk(&recipe.domain, &writer, job)
                } else {
                    merge_chunk(recipe, &writer, job, out_dtype)
                }
            })
            .collect::<Result<Vec<u64>>>()
    })?;
    for (job, c) in jobs.iter().zip(counts) {
        stats[job.tensor].non_finite_inputs += c;
    }
    for s in &stats {
        if s.non_finite_inputs > 0 {
            tracing::warn!(
                tensor = %s.name,
                count = s.non_finite_inputs,
                "non-finite input values propagated into merged tensor"
            );
        }
    }

    let handle = writer.finish()?;
    Ok(MergeOutcome {
        handle,
        alignment,
        tensors: stats,
    })
}

fn copy_chunk(domain: &CheckpointHandle, writer: &CheckpointWriter, job: &Job<'_>) -> Result<u64> {
    let width = domain.meta(job.name)?.dtype.bytes_per_element();
    let mut raw = Vec::new();
    domain.read_elements_into(job.name, job.start, job.count, &mut raw)?;
    writer.write_at(job.name, (job.start * width) as u64, &raw)?;
    Ok(0)
}

fn merge_chunk(recipe: &MergeRecipe, writer: &CheckpointWriter, job: &Job<'_>, out_dtype: DType) -> Result<u64> {
    let (name, start, count) = (job.name, job.start, job.count);
    let mut raw = Vec::new();
    let mut dom = Vec::new();
    let mut inst = Vec::new();
    let mut base = Vec::new();
    load_f32(&recipe.domain, name, start, count, &mut raw, &mut dom)?;
    load_f32(&recipe.instruct, name, start, count, &mut raw, &mut inst)?;
    load_f32(&recipe.base, name, start, count, &mut raw, &mut base)?;

    let mut non_finite = 0u64;
    for ((d, &i), &b) in dom.iter_mut().zip(&inst).zip(&base) {
        non_finite += u64::from(!d.is_finite()) + u64::from(!i.is_finite()) + u64::from(!b.is_finite());
        *d = merge_element(*d, i, b, recipe.lambda_domain, recipe.lambda_instruct);
    }
    drop((inst, base));

    raw.clear();
    encode_into(&dom, out_dtype, &mut raw);
    writer.write_at(name, (start * out_dtype.bytes_per_element()) as u64, &raw)?;
    Ok(non_finite)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn element_formula() {
        assert_eq!(merge_element(1.0, 2.0, 0.0, 1.0, 1.0), 3.0);
        // instruct == base leaves the domain value untouched
        for d in [0.1f32, -3.75, 1e-30, f32::MAX, -0.0] {
            for b in [0.0f32, 7.5, -1e20] {
                assert_eq!(merge_element(d, b, b, 1.0, 1.0), d);
                assert_eq!(merge_element(d, 9.0, b, 1.0, 0.0), d);
            }
        }
        // λ_dom = 0 drops the domain vector: base + λ_inst·(instruct − base)
        assert_eq!(merge_element(5.0, 2.0, 1.0, 0.0, 1.0), 2.0);
        assert_eq!(merge_element(5.0, 2.0, 1.0, 2.0, 0.5), 9.5);
    }

    #[test]
    fn infinite_task_delta_is_not_turned_into_nan() {
        let v = merge_element(f32::INFINITY, 1.0, 1.0, 1.0, 1.0);
        assert_eq!(v, f32::INFINITY);
        assert!(merge_element(f32::NAN, 1.0, 1.0, 1.0, 1.0).is_nan());
    }
}
