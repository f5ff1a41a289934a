use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::File;
use std::path::{Path, PathBuf};

use super::handle::CheckpointHandle;
use super::header::{encode_header, TensorMeta};
use super::io::write_all_at;
use crate::dtype::{encode_from_f32, DType};
use crate::{Error, Result};

pub const DEFAULT_MAX_SHARD_BYTES: u64 = 4 << 30;
pub const SINGLE_FILE: &str = "model.safetensors";
pub const INDEX_FILE: &str = "model.safetensors.index.json";

/// Output sharding. The limit counts tensor data bytes per shard, not the header.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShardPolicy {
    pub max_shard_bytes: u64,
    pub metadata: Option<BTreeMap<String, String>>,
}

impl Default for ShardPolicy {
    fn default() -> Self {
        Self {
            max_shard_bytes: DEFAULT_MAX_SHARD_BYTES,
            metadata: None,
        }
    }
}

impl ShardPolicy {
    pub fn with_max_shard_bytes(max_shard_bytes: u64) -> Self {
        Self {
            max_shard_bytes,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    /// Working values, narrowed to the tensor's dtype on write.
    F32(Vec<f32>),
    /// Already-encoded little-endian bytes, written verbatim.
    Raw(Vec<u8>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct PendingTensor {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<u64>,
    pub data: TensorData,
}

/// Name, dtype and shape of a tensor whose bytes arrive later.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorSpec {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<u64>,
}

impl TensorSpec {
    pub fn byte_len(&self) -> u64 {
        self.shape.iter().product::<u64>() * self.dtype.bytes_per_element() as u64
    }
}

struct Slot {
    shard: usize,
    /// Absolute file offset of the tensor's first byte.
    offset: u64,
    len: u64,
}

/// Pre-sized shard files with headers in place; tensor bytes are filled in
/// with positional writes, each range by exactly one caller.
///
/// `write_at` takes `&self`, so disjoint ranges may be written from several
/// threads at once. Bytes never written read back as zeros.
pub struct CheckpointWriter {
    dir: PathBuf,
    files: Vec<(String, File)>,
    slots: HashMap<String, Slot>,
    index: Option<(u64, BTreeMap<String, String>)>,
}

fn shard_name(i: usize, n: usize) -> String {
    if n == 1 {
        SINGLE_FILE.to_string()
    } else {
        format!("model-{:05}-of-{:05}.safetensors", i + 1, n)
    }
}

fn is_our_output(name: &str) -> bool {
    if name == SINGLE_FILE || name == INDEX_FILE {
        return true;
    }
    name.strip_prefix("model-")
        .and_then(|r| r.strip_suffix(".safetensors"))
        .and_then(|r| r.split_once("-of-"))
        .is_some_and(|(a, b)| {
            !a.is_empty() && !b.is_empty() && a.bytes().chain(b.bytes()).all(|c| c.is_ascii_digit())
        })
}

/// Removes checkpoint files a previous run left in `dir`, so stale shards never mix with new ones.
fn clear_previous_output(dir: &Path) -> Result<()> {
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if is_our_output(&name) && entry.path().is_file() {
            std::fs::remove_file(entry.path()).map_err(|e| Error::io(entry.path(), e))?;
        }
    }
    Ok(())
}

impl CheckpointWriter {
    pub fn create(dir: &Path, specs: &[TensorSpec], policy: &ShardPolicy) -> Result<Self> {
        let mut names = HashSet::new();
        for s in specs {
            if s.name.is_empty() {
                return Err(Error::InvalidArgument("empty tensor name".into()));
            }
            if !names.insert(s.name.as_str()) {
                return Err(Error::InvalidArgument(format!("duplicate tensor name {:?}", s.name)));
            }
        }

        // Greedy packing in input order; a tensor never straddles shards.
        let mut groups: Vec<Vec<&TensorSpec>> = Vec::new();
        let mut used = 0u64;
        for s in specs {
            let len = s.byte_len();
            if len > policy.max_shard_bytes {
                return Err(Error::TensorLargerThanShardLimit {
                    name: s.name.clone(),
                    bytes: len,
                    limit: policy.max_shard_bytes,
                });
            }
            match groups.last_mut() {
                Some(g) if used + len <= policy.max_shard_bytes => {
                    g.push(s);
                    used += len;
                }
                _ => {
                    groups.push(vec![s]);
                    used = len;
                }
            }
        }
        if groups.is_empty() {
            groups.push(Vec::new());
        }

        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        clear_previous_output(dir)?;

        let n = groups.len();
        let mut files = Vec::with_capacity(n);
        let mut slots = HashMap::with_capacity(specs.len());
        let mut weight_map = BTreeMap::new();
        let mut total_size = 0u64;
        for (i, group) in groups.iter().enumerate() {
            let fname = shard_name(i, n);
            let mut metas = Vec::with_capacity(group.len());
            let mut cursor = 0u64;
            for s in group {
                let len = s.byte_len();
                metas.push(TensorMeta {
                    name: s.name.clone(),
                    dtype: s.dtype,
                    shape: s.shape.clone(),
                    data_offsets: (cursor, cursor + len),
                });
                cursor += len;
            }
            let header = encode_header(&metas, policy.metadata.as_ref());
            let path = dir.join(&fname);
            let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
            file.set_len(header.len() as u64 + cursor)
                .map_err(|e| Error::io(&path, e))?;
            write_all_at(&file, &header, 0).map_err(|e| Error::io(&path, e))?;
            for m in metas {
                weight_map.insert(m.name.clone(), fname.clone());
                slots.insert(
                    m.name,
                    Slot {
                        shard: i,
                        offset: header.len() as u64 + m.data_offsets.0,
                        len: m.data_offsets.1 - m.data_offsets.0,
                    },
                );
            }
            total_size += cursor;
            files.push((fname, file));
        }

        Ok(Self {
            dir: dir.to_path_buf(),
            files,
            slots,
            index: (n > 1).then_some((total_size, weight_map)),
        })
    }

    /// Writes `bytes` at `offset` bytes into tensor `name`.
    pub fn write_at(&self, name: &str, offset: u64, bytes: &[u8]) -> Result<()> {
        let slot = self
            .slots
            .get(name)
            .ok_or_else(|| Error::MissingTensor(name.to_string()))?;
        if offset + bytes.len() as u64 > slot.len {
            return Err(Error::InvalidArgument(format!(
                "write of {} bytes at {offset} overruns {name:?} ({} bytes)",
                bytes.len(),
                slot.len
            )));
        }
        let (fname, file) = &self.files[slot.shard];
        write_all_at(file, bytes, slot.offset + offset).map_err(|e| Error::io(self.dir.join(fname), e))
    }

    /// Flushes shards, writes the index when sharded, and reopens the result.
    pub fn finish(self) -> Result<CheckpointHandle> {
        for (fname, file) in &self.files {
            file.sync_all().map_err(|e| Error::io(self.dir.join(fname), e))?;
        }
        if let Some((total_size, weight_map)) = &self.index {
            let doc = serde_json::json!({
                "metadata": { "total_size": total_size },
                "weight_map": weight_map,
            });
            let path = self.dir.join(INDEX_FILE);
            let text = serde_json::to_string_pretty(&doc).expect("index serializes");
            std::fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
        }
        CheckpointHandle::open(&self.dir)
    }
}

/// Writes tensors to `out_dir` as one shard, or several plus an index when
/// they do not fit under the policy's limit.
pub fn write_checkpoint(
    tensors: impl IntoIterator<Item = PendingTensor>,
    out_dir: impl AsRef<Path>,
    policy: &ShardPolicy,
) -> Result<CheckpointHandle> {
    let tensors: Vec<PendingTensor> = tensors.into_iter().collect();
    let specs: Vec<TensorSpec> = tensors
        .iter()
        .map(|t| TensorSpec {
            name: t.name.clone(),
            dtype: t.dtype,
            shape: t.shape.clone(),
        })
        .collect();
    for (t, s) in tensors.iter().zip(&specs) {
        let supplied = match &t.data {
            TensorData::F32(v) => (v.len() * t.dtype.bytes_per_element()) as u64,
            TensorData::Raw(b) => b.len() as u64,
        };
        if supplied != s.byte_len() {
            return Err(Error::InvalidArgument(format!(
                "{:?} supplies {supplied} bytes but shape {:?} of {} needs {}",
                t.name,
                t.shape,
                t.dtype,
                s.byte_len()
            )));
        }
    }
    let writer = CheckpointWriter::create(out_dir.as_ref(), &specs, policy)?;
    for t in &tensors {
        match &t.data {
            TensorData::F32(v) => writer.write_at(&t.name, 0, &encode_from_f32(v, t.dtype))?,
            TensorData::Raw(b) => writer.write_at(&t.name, 0, b)?,
        }
    }
    writer.finish()
}
