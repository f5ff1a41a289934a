use std::collections::BTreeMap;
use std::fs::File;
use std::path::{Path, PathBuf};

use serde_json::Value;

use super::header::{read_shard_header, ShardHeader, TensorMeta};
use super::io::read_exact_at;
use crate::dtype::DType;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct OpenOptions {
    /// Downgrade shard tensors missing from the index from an error to a
    /// warning. Every other check stays strict.
    pub lenient: bool,
}

/// Stored bytes of one tensor, unmodified.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorView {
    pub meta: TensorMeta,
    pub bytes: Vec<u8>,
}

#[derive(Debug)]
struct Shard {
    path: PathBuf,
    file_name: String,
    file: File,
    header: ShardHeader,
}

/// An opened checkpoint: one shard file, or several tied together by an index.
///
/// Reads use positional I/O, so a handle can be shared across threads.
#[derive(Debug)]
pub struct CheckpointHandle {
    root: PathBuf,
    index: Option<PathBuf>,
    index_total_size: Option<u64>,
    shards: Vec<Shard>,
    weight_map: BTreeMap<String, usize>,
    warnings: Vec<String>,
}

fn file_name_of(path: &Path) -> String {
    path.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default()
}

fn open_shard(path: &Path) -> Result<Shard> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let header = read_shard_header(&file, path)?;
    Ok(Shard {
        path: path.to_path_buf(),
        file_name: file_name_of(path),
        file,
        header,
    })
}

struct IndexFile {
    total_size: Option<u64>,
    weight_map: BTreeMap<String, String>,
}

fn read_index(path: &Path) -> Result<IndexFile> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let bad = |msg: &str| Error::MalformedHeader(format!("index {}: {msg}", path.display()));
    let v: Value = serde_json::from_str(&text).map_err(|e| bad(&e.to_string()))?;
    let obj = v.as_object().ok_or_else(|| bad("not a JSON object"))?;
    let total_size = match obj.get("metadata") {
        None | Some(Value::Null) => None,
        Some(md) => match md.get("total_size") {
            None => None,
            Some(ts) => Some(ts.as_u64().ok_or_else(|| bad("total_size is not an integer"))?),
        },
    };
    let wm = obj
        .get("weight_map")
        .and_then(Value::as_object)
        .ok_or_else(|| bad("missing weight_map object"))?;
    let weight_map = wm
        .iter()
        .map(|(k, v)| {
            v.as_str()
                .map(|s| (k.clone(), s.to_string()))
                .ok_or_else(|| bad("weight_map values must be strings"))
        })
        .collect::<Result<_>>()?;
    Ok(IndexFile {
        total_size,
        weight_map,
    })
}

fn is_index_file(path: &Path) -> bool {
    file_name_of(path).ends_with(".index.json")
}

impl CheckpointHandle {
    /// Opens a shard file, an index file, or a directory holding either.
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        Self::open_with(path, OpenOptions::default())
    }

    pub fn open_with(path: impl AsRef<Path>, opts: OpenOptions) -> Result<Self> {
        let path = path.as_ref();
        if path.is_file() {
            return if is_index_file(path) {
                Self::from_index(path.to_path_buf(), opts)
            } else {
                Self::from_shards(path.to_path_buf(), vec![path.to_path_buf()])
            };
        }
        if !path.is_dir() {
            return Err(Error::NoCheckpoint(path.to_path_buf()));
        }
        let mut indexes = Vec::new();
        let mut shards = Vec::new();
        for entry in std::fs::read_dir(path).map_err(|e| Error::io(path, e))? {
            let p = entry.map_err(|e| Error::io(path, e))?.path();
            if !p.is_file() {
                continue;
            }
            if is_index_file(&p) {
                indexes.push(p);
            } else if p.extension().is_some_and(|e| e == "safetensors") {
                shards.push(p);
            }
        }
        match indexes.len() {
            0 if shards.is_empty() => Err(Error::NoCheckpoint(path.to_path_buf())),
            0 => {
                shards.sort();
                Self::from_shards(path.to_path_buf(), shards)
            }
            1 => Self::from_index(indexes.pop().expect("one index"), opts),
            _ => Err(Error::InvalidArgument(format!(
                "{} holds more than one index file",
                path.display()
            ))),
        }
    }

    fn from_shards(root: PathBuf, paths: Vec<PathBuf>) -> Result<Self> {
        let shards = paths.iter().map(|p| open_shard(p)).collect::<Result<Vec<_>>>()?;
        let mut weight_map = BTreeMap::new();
        for (i, shard) in shards.iter().enumerate() {
            for name in shard.header.tensors.keys() {
                if let Some(prev) = weight_map.insert(name.clone(), i) {
                    return Err(Error::DuplicateTensor {
                        name: name.clone(),
                        first: shards[prev].file_name.clone(),
                        second: shard.file_name.clone(),
                    });
                }
            }
        }
        Ok(Self {
            root,
            index: None,
            index_total_size: None,
            shards,
            weight_map,
            warnings: Vec::new(),
        })
    }

    fn from_index(index_path: PathBuf, opts: OpenOptions) -> Result<Self> {
        let index = read_index(&index_path)?;
        let dir = index_path.parent().unwrap_or(Path::new(".")).to_path_buf();

        let mut files: Vec<&String> = index.weight_map.values().collect();
        files.sort();
        files.dedup();
        let mut shards = Vec::with_capacity(files.len());
        let mut shard_of_file = BTreeMap::new();
        for f in files {
            let p = dir.join(f);
            if !p.is_file() {
                let tensor = index
                    .weight_map
                    .iter()
                    .find(|(_, v)| *v == f)
                    .map(|(k, _)| k.clone())
                    .unwrap_or_default();
                return Err(Error::DanglingIndexEntry {
                    tensor,
                    shard: f.clone(),
                });
            }
            shard_of_file.insert(f.clone(), shards.len());
            shards.push(open_shard(&p)?);
        }

        let mut weight_map = BTreeMap::new();
        for (name, f) in &index.weight_map {
            let i = shard_of_file[f];
            if !shards[i].header.tensors.contains_key(name) {
                return Err(Error::DanglingIndexEntry {
                    tensor: name.clone(),
                    shard: f.clone(),
                });
            }
            weight_map.insert(name.clone(), i);
        }

        let mut warnings = Vec::new();
        let mut seen: BTreeMap<&str, usize> = BTreeMap::new();
        for (i, shard) in shards.iter().enumerate() {
            for name in shard.header.tensors.keys() {
                if let Some(&prev) = seen.get(name.as_str()) {
                    return Err(Error::DuplicateTensor {
                        name: name.clone(),
                        first: shards[prev].file_name.clone(),
                        second: shard.file_name.clone(),
                    });
                }
                seen.insert(name, i);
                if weight_map.get(name) != Some(&i) {
                    let err = Error::UnusedTensor {
                        name: name.clone(),
                        shard: shard.file_name.clone(),
                    };
                    if !opts.lenient {
                        return Err(err);
                    }
                    tracing::warn!("{err}");
                    warnings.push(err.to_string());
                }
            }
        }

        Ok(Self {
            root: dir,
            index: Some(index_path),
            index_total_size: index.total_size,
            shards,
            weight_map,
            warnings,
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn index_path(&self) -> Option<&Path> {
        self.index.as_deref()
    }

    /// `total_size` declared in the index metadata, if any.
    pub fn index_total_size(&self) -> Option<u64> {
        self.index_total_size
    }

    /// Shard file paths in sorted order.
    pub fn shard_paths(&self) -> Vec<&Path> {
        self.shards.iter().map(|s| s.path.as_path()).collect()
    }

    pub fn shard_headers(&self) -> impl Iterator<Item = (&str, &ShardHeader)> {
        self.shards.iter().map(|s| (s.file_name.as_str(), &s.header))
    }

    /// Warnings collected while opening leniently.
    pub fn warnings(&self) -> &[String] {
        &self.warnings
    }

    /// Tensor names in lexicographic order.
    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.weight_map.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.weight_map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weight_map.is_empty()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.weight_map.contains_key(name)
    }

    /// Tensor name to shard filename.
    pub fn weight_map(&self) -> BTreeMap<&str, &str> {
        self.weight_map
            .iter()
            .map(|(k, &i)| (k.as_str(), self.shards[i].file_name.as_str()))
            .collect()
    }

    pub fn meta(&self, name: &str) -> Result<&TensorMeta> {
        let &i = self
            .weight_map
            .get(name)
            .ok_or_else(|| Error::MissingTensor(name.to_string()))?;
        Ok(&self.shards[i].header.tensors[name])
    }

    pub fn total_parameter_count(&self) -> u64 {
        self.weight_map
            .keys()
            .map(|n| self.meta(n).map_or(0, TensorMeta::element_count))
            .sum()
    }

    /// Sum of stored tensor bytes.
    pub fn total_bytes(&self) -> u64 {
        self.weight_map
            .keys()
            .map(|n| self.meta(n).map_or(0, TensorMeta::byte_len))
            .sum()
    }

    /// Number of tensors stored in each dtype.
    pub fn dtype_census(&self) -> BTreeMap<DType, usize> {
        let mut census = BTreeMap::new();
        for n in self.weight_map.keys() {
            if let Ok(m) = self.meta(n) {
                *census.entry(m.dtype).or_default() += 1;
            }
        }
        census
    }

    pub fn read_tensor(&self, name: &str) -> Result<TensorView> {
        let meta = self.meta(name)?.clone();
        let mut bytes = Vec::new();
        self.read_elements_into(name, 0, meta.element_count() as usize, &mut bytes)?;
        Ok(TensorView { meta, bytes })
    }

    /// Reads `count` stored elements starting at element `start`, replacing the contents of `buf`.
    pub fn read_elements_into(&self, name: &str, start: usize, count: usize, buf: &mut Vec<u8>) -> Result<()> {
        let &i = self
            .weight_map
            .get(name)
            .ok_or_else(|| Error::MissingTensor(name.to_string()))?;
        let shard = &self.shards[i];
        let meta = &shard.header.tensors[name];
        let width = meta.dtype.bytes_per_element() as u64;
        let (start, count) = (start as u64, count as u64);
        if start + count > meta.element_count() {
            return Err(Error::InvalidArgument(format!(
                "elements {start}..{} exceed {name:?} ({} elements)",
                start + count,
                meta.element_count()
            )));
        }
        buf.clear();
        buf.resize((count * width) as usize, 0);
        let offset = shard.header.data_start() + meta.data_offsets.0 + start * width;
        read_exact_at(&shard.file, buf, offset).map_err(|e| Error::io(&shard.path, e))
    }
}
