use std::collections::BTreeSet;
use std::fmt;

use globset::{Glob, GlobSet, GlobSetBuilder};
use serde::Serialize;

use crate::container::CheckpointHandle;
use crate::dtype::DType;
use crate::{Error, Result};

/// Glob patterns (`*`, `?`, `[..]`) over full tensor names.
#[derive(Debug, Clone)]
pub struct SkipPatterns {
    patterns: Vec<String>,
    set: GlobSet,
}

impl Default for SkipPatterns {
    fn default() -> Self {
        Self {
            patterns: Vec::new(),
            set: GlobSet::empty(),
        }
    }
}

impl SkipPatterns {
    pub fn new<S: AsRef<str>>(patterns: &[S]) -> Result<Self> {
        let mut b = GlobSetBuilder::new();
        for p in patterns {
            let glob = Glob::new(p.as_ref())
                .map_err(|e| Error::InvalidArgument(format!("bad skip pattern {:?}: {e}", p.as_ref())))?;
            b.add(glob);
        }
        let set = b
            .build()
            .map_err(|e| Error::InvalidArgument(format!("bad skip patterns: {e}")))?;
        Ok(Self {
            patterns: patterns.iter().map(|p| p.as_ref().to_string()).collect(),
            set,
        })
    }

    pub fn matches(&self, name: &str) -> bool {
        !self.patterns.is_empty() && self.set.is_match(name)
    }

    pub fn patterns(&self) -> &[String] {
        &self.patterns
    }

    pub fn is_empty(&self) -> bool {
        self.patterns.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Aligned,
    Misaligned,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ShapeMismatch {
    pub name: String,
    pub shapes: Vec<Vec<u64>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct DTypeMismatch {
    pub name: String,
    pub dtypes: Vec<DType>,
}

/// Every discrepancy between checkpoints, in lexicographic name order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct AlignmentReport {
    /// Names (after skips) present in every checkpoint.
    pub common_names: usize,
    /// For each checkpoint, in argument order, the names the others have and it lacks.
    pub missing_in_each: Vec<Vec<String>>,
    pub shape_mismatches: Vec<ShapeMismatch>,
    pub dtype_mismatches: Vec<DTypeMismatch>,
    pub verdict: Verdict,
}

impl AlignmentReport {
    pub fn is_aligned(&self) -> bool {
        self.verdict == Verdict::Aligned
    }

    /// True when names and shapes line up, whatever the dtypes.
    pub fn is_structurally_aligned(&self) -> bool {
        self.shape_mismatches.is_empty() && self.missing_in_each.iter().all(Vec::is_empty)
    }
}

impl fmt::Display for AlignmentReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} common tensors", self.common_names)?;
        for (i, missing) in self.missing_in_each.iter().enumerate() {
            if !missing.is_empty() {
                write!(f, "; checkpoint #{} lacks {}: {:?}", i + 1, missing.len(), missing)?;
            }
        }
        for m in &self.shape_mismatches {
            write!(f, "; shape mismatch {:?} {:?}", m.name, m.shapes)?;
        }
        for m in &self.dtype_mismatches {
            write!(f, "; dtype mismatch {:?} {:?}", m.name, m.dtypes)?;
        }
        Ok(())
    }
}

/// Compares name sets, shapes and dtypes across checkpoints. Names matching
/// `skip` are ignored entirely. Misalignment is reported, not raised.
pub fn validate_alignment(handles: &[&CheckpointHandle], skip: &SkipPatterns) -> AlignmentReport {
    let union: BTreeSet<&str> = handles
        .iter()
        .flat_map(|h| h.names())
        .filter(|n| !skip.matches(n))
        .collect();

    let missing_in_each: Vec<Vec<String>> = handles
        .iter()
        .map(|h| {
            union
                .iter()
                .filter(|n| !h.contains(n))
                .map(|n| n.to_string())
                .collect()
        })
        .collect();

    let mut common_names = 0;
    let mut shape_mismatches = Vec::new();
    let mut dtype_mismatches = Vec::new();
    for name in &union {
        let metas: Vec<_> = match handles.iter().map(|h| h.meta(name)).collect::<Result<Vec<_>>>() {
            Ok(m) => m,
            Err(_) => continue,
        };
        common_names += 1;
        if metas.windows(2).any(|w| w[0].shape != w[1].shape) {
            shape_mismatches.push(ShapeMismatch {
                name: name.to_string(),
                shapes: metas.iter().map(|m| m.shape.clone()).collect(),
            });
        }
        if metas.windows(2).any(|w| w[0].dtype != w[1].dtype) {
            dtype_mismatches.push(DTypeMismatch {
                name: name.to_string(),
                dtypes: metas.iter().map(|m| m.dtype).collect(),
            });
        }
    }

    let clean = shape_mismatches.is_empty()
        && dtype_mismatches.is_empty()
        && missing_in_each.iter().all(Vec::is_empty);
    AlignmentReport {
        common_names,
        missing_in_each,
        shape_mismatches,
        dtype_mismatches,
        verdict: if clean { Verdict::Aligned } else { Verdict::Misaligned },
    }
}

/// Fails with `MisalignedCheckpoints` unless names and shapes agree.
pub(crate) fn require_structural(handles: &[&CheckpointHandle], skip: &SkipPatterns) -> Result<AlignmentReport> {
    let report = validate_alignment(handles, skip);
    if report.is_structurally_aligned() {
        Ok(report)
    } else {
        Err(Error::MisalignedCheckpoints(Box::new(report)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn skip_globs() {
        let s = SkipPatterns::new(&["*.embed_tokens.*", "lm_head.weight"]).unwrap();
        assert!(s.matches("model.embed_tokens.weight"));
        assert!(s.matches("lm_head.weight"));
        assert!(!s.matches("model.layers.0.mlp.weight"));
        assert!(!SkipPatterns::default().matches("anything"));
        assert!(SkipPatterns::new(&["[unclosed"]).is_err());
    }
}
