//! How independent are two task vectors?
//!
//! For the domain vector `domain − base` and the instruction vector
//! `instruct − base`, every tensor is flattened and their cosine similarity
//! taken. Entries are then grouped by layer type (numeric path segments such
//! as the transformer block index replaced by `*`) and summarized.

mod report;

use std::collections::BTreeMap;

use rayon::prelude::*;

pub use report::{emit_report, format_sig9, render_csv, render_json, render_svg, ReportFormat};

use crate::exec::{chunk_ranges, ExecOptions};
use crate::merge::{validate_alignment, SkipPatterns, TaskVector};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityEntry {
    pub tensor_name: String,
    pub layer_type: String,
    /// `None` when either vector has zero norm on this tensor.
    pub cosine: Option<f64>,
    pub norm_a: f64,
    pub norm_b: f64,
    pub element_count: u64,
}

/// Running dot product and squared norms, accumulated in f64.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct CosineAccumulator {
    pub dot: f64,
    pub norm_a_sq: f64,
    pub norm_b_sq: f64,
}

impl CosineAccumulator {
    pub fn push(&mut self, a: &[f32], b: &[f32]) {
        debug_assert_eq!(a.len(), b.len());
        for (&x, &y) in a.iter().zip(b) {
            let (x, y) = (f64::from(x), f64::from(y));
            self.dot += x * y;
            self.norm_a_sq += x * x;
            self.norm_b_sq += y * y;
        }
    }

    pub fn norm_a(&self) -> f64 {
        self.norm_a_sq.sqrt()
    }

    pub fn norm_b(&self) -> f64 {
        self.norm_b_sq.sqrt()
    }

    /// Cosine before clamping; `None` if either norm is zero.
    pub fn raw_cosine(&self) -> Option<f64> {
        if !(self.norm_a_sq > 0.0 && self.norm_b_sq > 0.0) {
            return None;
        }
        // sqrt(x·x) is exactly x, so a vector against itself gives exactly 1.
        let prod = self.norm_a_sq * self.norm_b_sq;
        let denom = if prod.is_normal() {
            prod.sqrt()
        } else {
            self.norm_a() * self.norm_b()
        };
        Some(self.dot / denom)
    }

    /// Cosine clamped to `[-1, 1]`.
    pub fn cosine(&self) -> Option<f64> {
        self.raw_cosine().map(|c| c.clamp(-1.0, 1.0))
    }
}

/// Replaces every dot-separated segment made only of ASCII digits with `*`.
pub fn layer_type_of(tensor_name: &str) -> String {
    tensor_name
        .split('.')
        .map(|seg| {
            if !seg.is_empty() && seg.bytes().all(|b| b.is_ascii_digit()) {
                "*"
            } else {
                seg
            }
        })
        .collect::<Vec<_>>()
        .join(".")
}

/// One entry per tensor: cosine between `v_a` and `v_b` over the flattened tensor.
///
/// Within a tensor, chunks are accumulated sequentially in offset order, so
/// results do not depend on the thread count.
pub fn cosine_per_tensor(v_a: &TaskVector<'_>, v_b: &TaskVector<'_>, exec: &ExecOptions) -> Result<Vec<SimilarityEntry>> {
    exec.validate()?;
    let report = validate_alignment(&[v_a.target(), v_b.target()], &SkipPatterns::default());
    if !report.is_structurally_aligned() || v_a.names() != v_b.names() {
        return Err(Error::MisalignedCheckpoints(Box::new(report)));
    }
    let chunk = exec.chunk_elements();
    exec.pool()?.install(|| {
        v_a.names()
            .par_iter()
            .map(|name| {
                let n = v_a.element_count(name)?;
                let mut acc = CosineAccumulator::default();
                let mut bufs = Default::default();
                let mut bufs_b = Default::default();
                let (mut a, mut b) = (Vec::new(), Vec::new());
                for (start, count) in chunk_ranges(n, chunk) {
                    v_a.chunk_into(name, start, count, &mut bufs, &mut a)?;
                    v_b.chunk_into(name, start, count, &mut bufs_b, &mut b)?;
                    acc.push(&a, &b);
                }
                Ok(SimilarityEntry {
                    tensor_name: name.clone(),
                    layer_type: layer_type_of(name),
                    cosine: acc.cosine(),
                    norm_a: acc.norm_a(),
                    norm_b: acc.norm_b(),
                    element_count: n as u64,
                })
            })
            .collect()
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stats {
    /// Number of values summarized.
    pub count: usize,
    pub mean: f64,
    /// Population standard deviation (divides by `count`).
    pub std: f64,
    pub min: f64,
    pub max: f64,
}

impl Stats {
    /// `None` for an empty slice. Values are sorted first so the result does
    /// not depend on their order.
    pub fn from_values(values: &[f64]) -> Option<Stats> {
        if values.is_empty() {
            return None;
        }
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
        Some(Stats {
            count: v.len(),
            mean,
            std: var.sqrt(),
            min: v[0],
            max: v[v.len() - 1],
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupSummary {
    /// All entries of this layer type, defined or not.
    pub count: usize,
    pub undefined: usize,
    /// Over defined cosines only; `None` if there are none.
    pub stats: Option<Stats>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityReport {
    pub entries: Vec<SimilarityEntry>,
    pub groups: BTreeMap<String, GroupSummary>,
    pub global: Stats,
    pub undefined_count: usize,
}

/// Per-layer-type and global statistics over the defined cosines. Entries are
/// kept sorted by tensor name.
pub fn summarize(entries: &[SimilarityEntry]) -> Result<SimilarityReport> {
    let defined: Vec<f64> = entries.iter().filter_map(|e| e.cosine).collect();
    let global = Stats::from_values(&defined).ok_or(Error::NoDefinedEntries)?;

    let mut by_type: BTreeMap<&str, (usize, Vec<f64>)> = BTreeMap::new();
    for e in entries {
        let slot = by_type.entry(e.layer_type.as_str()).or_default();
        slot.0 += 1;
        slot.1.extend(e.cosine);
    }
    let groups = by_type
        .into_iter()
        .map(|(k, (count, values))| {
            (
                k.to_string(),
                GroupSummary {
                    count,
                    undefined: count - values.len(),
                    stats: Stats::from_values(&values),
                },
            )
        })
        .collect();

    let mut sorted = entries.to_vec();
    sorted.sort_by(|a, b| a.tensor_name.cmp(&b.tensor_name));
    Ok(SimilarityReport {
        entries: sorted,
        groups,
        global,
        undefined_count: entries.len() - defined.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entry(name: &str, cosine: Option<f64>) -> SimilarityEntry {
        SimilarityEntry {
            tensor_name: name.into(),
            layer_type: layer_type_of(name),
            cosine,
            norm_a: 1.0,
            norm_b: if cosine.is_some() { 1.0 } else { 0.0 },
            element_count: 4,
        }
    }

    fn cos(a: &[f32], b: &[f32]) -> Option<f64> {
        let mut acc = CosineAccumulator::default();
        acc.push(a, b);
        acc.cosine()
    }

    #[test]
    fn cosine_examples() {
        let v = [0.3f32, -1.25, 7.0, 1e-3];
        assert_eq!(cos(&v, &v), Some(1.0));
        assert_eq!(cos(&[1.0, 0.0, 0.0], &[0.0, 1.0, 0.0]), Some(0.0));
        let c = cos(&[1.0, 0.0], &[1.0, 1.0]).unwrap();
        assert!((c - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-9);
        assert_eq!(cos(&[0.0, 0.0], &[1.0, 1.0]), None);
        assert_eq!(cos(&[-2.0], &[4.0]), Some(-1.0));
    }

    #[test]
    fn layer_types() {
        assert_eq!(
            layer_type_of("transformer.h.17.attn.c_proj.weight"),
            "transformer.h.*.attn.c_proj.weight"
        );
        assert_eq!(layer_type_of("lm_head.weight"), "lm_head.weight");
        assert_eq!(layer_type_of("h.0.mlp.w1"), layer_type_of("h.39.mlp.w1"));
        assert_eq!(layer_type_of("h.1a.x"), "h.1a.x");
        assert_eq!(layer_type_of("a..0"), "a..*");
    }

    #[test]
    fn summary_examples() {
        let r = summarize(&[entry("x", Some(0.25))]).unwrap();
        assert_eq!((r.global.mean, r.global.std, r.global.min, r.global.max), (0.25, 0.0, 0.25, 0.25));

        let r = summarize(&[entry("h.0.w", Some(0.1)), entry("h.1.w", Some(-0.1))]).unwrap();
        assert_eq!(r.global.mean, 0.0);
        assert!((r.global.std - 0.1).abs() < 1e-15);
        assert_eq!((r.global.min, r.global.max), (-0.1, 0.1));
        assert_eq!(r.groups.len(), 1);
        assert_eq!(r.groups["h.*.w"].count, 2);

        let r = summarize(&[entry("a", Some(0.5)), entry("b", None)]).unwrap();
        assert_eq!(r.undefined_count, 1);
        assert_eq!(r.global.count, 1);
        assert_eq!(r.groups["b"].stats, None);
        assert_eq!(r.groups.values().map(|g| g.count).sum::<usize>(), 2);

        assert!(matches!(summarize(&[entry("a", None)]), Err(Error::NoDefinedEntries)));
        assert!(matches!(summarize(&[]), Err(Error::NoDefinedEntries)));
    }
}
