//! Run manifests: what was run, with which effective options, on which bytes.

use std::collections::BTreeMap;
use std::fs::File;
use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::{Context, Result};
use serde::Serialize;
use serde_json::Value;
use sha2::{Digest, Sha256};
use tvmerge_core::CheckpointHandle;

/// File name to hex SHA-256.
pub type Digests = BTreeMap<String, String>;

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub config: Value,
    /// Role (e.g. `base`) to per-file digests.
    pub inputs: BTreeMap<String, Digests>,
    pub outputs: Digests,
    pub tool_version: String,
    pub wall_time_secs: f64,
}

impl RunManifest {
    pub fn new(command: &str, config: Value) -> Self {
        Self {
            command: command.to_string(),
            config,
            inputs: BTreeMap::new(),
            outputs: Digests::new(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            wall_time_secs: 0.0,
        }
    }

    pub fn input_checkpoint(&mut self, role: &str, handle: &CheckpointHandle) -> Result<()> {
        self.inputs.insert(role.to_string(), checkpoint_digests(handle)?);
        Ok(())
    }

    pub fn input_file(&mut self, role: &str, path: &Path) -> Result<()> {
        let entry = self.inputs.entry(role.to_string()).or_default();
        entry.insert(display_name(path), sha256_file(path)?);
        Ok(())
    }

    pub fn output_checkpoint(&mut self, handle: &CheckpointHandle) -> Result<()> {
        self.outputs = checkpoint_digests(handle)?;
        Ok(())
    }

    pub fn output_file(&mut self, path: &Path) -> Result<()> {
        self.outputs.insert(display_name(path), sha256_file(path)?);
        Ok(())
    }

    /// Writes `<out>.manifest.json` next to the output and returns its path.
    pub fn write(mut self, out: &Path, wall: Duration) -> Result<PathBuf> {
        self.wall_time_secs = wall.as_secs_f64();
        let path = manifest_path(out);
        let value = serde_json::to_value(&self)?;
        let text = serde_json::to_string_pretty(&value)? + "\n";
        std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }
}

pub fn manifest_path(out: &Path) -> PathBuf {
    let s = out.as_os_str().to_string_lossy();
    let trimmed = s.trim_end_matches(['/', '\\']);
    PathBuf::from(format!("{trimmed}.manifest.json"))
}

fn display_name(path: &Path) -> String {
    path.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let mut f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut h = Sha256::new();
    std::io::copy(&mut f, &mut h).with_context(|| format!("reading {}", path.display()))?;
    Ok(hex::encode(h.finalize()))
}

/// Digests of every shard plus the index file, if any.
pub fn checkpoint_digests(handle: &CheckpointHandle) -> Result<Digests> {
    let mut out = Digests::new();
    for p in handle.shard_paths() {
        out.insert(display_name(p), sha256_file(p)?);
    }
    if let Some(p) = handle.index_path() {
        out.insert(display_name(p), sha256_file(p)?);
    }
    Ok(out)
}
