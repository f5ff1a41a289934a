use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs::File;
use std::path::Path;

use serde::de::{Deserializer, MapAccess, Visitor};
use serde::Deserialize;
use serde_json::Value;

use super::io::read_exact_at;
use crate::dtype::DType;
use crate::{Error, Result};

/// Largest header accepted. Published checkpoints stay far below this.
pub const MAX_HEADER_BYTES: u64 = 100 << 20;

pub(crate) const METADATA_KEY: &str = "__metadata__";

/// One stored tensor. Offsets are relative to the start of the shard's data section.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorMeta {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<u64>,
    pub data_offsets: (u64, u64),
}

impl TensorMeta {
    /// Product of the shape; an empty shape is a scalar.
    pub fn element_count(&self) -> u64 {
        self.shape.iter().product()
    }

    pub fn byte_len(&self) -> u64 {
        self.data_offsets.1 - self.data_offsets.0
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ShardHeader {
    pub tensors: BTreeMap<String, TensorMeta>,
    pub metadata: Option<BTreeMap<String, String>>,
    /// Length of the JSON header, excluding the 8-byte length prefix.
    pub header_len: u64,
    /// Length of the data section following the header.
    pub data_len: u64,
}

impl ShardHeader {
    /// Absolute file offset of the data section.
    pub fn data_start(&self) -> u64 {
        8 + self.header_len
    }

    pub fn tensors_by_offset(&self) -> Vec<&TensorMeta> {
        let mut v: Vec<_> = self.tensors.values().collect();
        v.sort_by_key(|m| (m.data_offsets, m.name.as_str()));
        v
    }
}

/// Parses and validates the header of a complete shard held in memory.
pub fn parse_shard_header(bytes: &[u8]) -> Result<ShardHeader> {
    if bytes.len() < 8 {
        return Err(Error::Truncated {
            declared: 8,
            available: bytes.len() as u64,
        });
    }
    let header_len = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes"));
    let available = bytes.len() as u64 - 8;
    if header_len > available {
        return Err(Error::Truncated {
            declared: header_len,
            available,
        });
    }
    let json = &bytes[8..8 + header_len as usize];
    parse_header_json(json, available - header_len)
}

/// Reads and validates a shard header straight from a file without loading the data section.
pub(crate) fn read_shard_header(file: &File, path: &Path) -> Result<ShardHeader> {
    let file_len = file.metadata().map_err(|e| Error::io(path, e))?.len();
    if file_len < 8 {
        return Err(Error::Truncated {
            declared: 8,
            available: file_len,
        });
    }
    let mut prefix = [0u8; 8];
    read_exact_at(file, &mut prefix, 0).map_err(|e| Error::io(path, e))?;
    let header_len = u64::from_le_bytes(prefix);
    let available = file_len - 8;
    if header_len > available {
        return Err(Error::Truncated {
            declared: header_len,
            available,
        });
    }
    if header_len > MAX_HEADER_BYTES {
        return Err(Error::MalformedHeader(format!(
            "header of {header_len} bytes exceeds the {MAX_HEADER_BYTES} byte limit"
        )));
    }
    let mut json = vec![0u8; header_len as usize];
    read_exact_at(file, &mut json, 8).map_err(|e| Error::io(path, e))?;
    parse_header_json(&json, available - header_len)
}

/// JSON object that remembers key order and rejects duplicate keys.
struct UniqueEntries(Vec<(String, Value)>);

impl<'de> Deserialize<'de> for UniqueEntries {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        struct V;
        impl<'de> Visitor<'de> for V {
            type Value = UniqueEntries;

            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("a JSON object")
            }

            fn visit_map<A: MapAccess<'de>>(self, mut map: A) -> std::result::Result<Self::Value, A::Error> {
                let mut seen = HashSet::new();
                let mut out = Vec::new();
                while let Some((k, v)) = map.next_entry::<String, Value>()? {
                    if !seen.insert(k.clone()) {
                        return Err(serde::de::Error::custom(format!("duplicate key {k:?}")));
                    }
                    out.push((k, v));
                }
                Ok(UniqueEntries(out))
            }
        }
        d.deserialize_map(V)
    }
}

fn malformed(msg: impl Into<String>) -> Error {
    Error::MalformedHeader(msg.into())
}

fn as_u64_list(v: &Value, what: &str, name: &str) -> Result<Vec<u64>> {
    v.as_array()
        .ok_or_else(|| malformed(format!("{what} of {name:?} is not an array")))?
        .iter()
        .map(|x| {
            x.as_u64()
                .ok_or_else(|| malformed(format!("{what} of {name:?} holds a non-integer")))
        })
        .collect()
}

fn parse_entry(name: &str, v: &Value) -> Result<TensorMeta> {
    if name.is_empty() {
        return Err(malformed("empty tensor name"));
    }
    let obj = v
        .as_object()
        .ok_or_else(|| malformed(format!("entry {name:?} is not an object")))?;
    for key in obj.keys() {
        if !matches!(key.as_str(), "dtype" | "shape" | "data_offsets") {
            return Err(malformed(format!("entry {name:?} has unexpected key {key:?}")));
        }
    }
    let dtype = obj
        .get("dtype")
        .and_then(Value::as_str)
        .ok_or_else(|| malformed(format!("entry {name:?} lacks a string dtype")))?
        .parse::<DType>()?;
    let shape = as_u64_list(
        obj.get("shape")
            .ok_or_else(|| malformed(format!("entry {name:?} lacks a shape")))?,
        "shape",
        name,
    )?;
    let offsets = as_u64_list(
        obj.get("data_offsets")
            .ok_or_else(|| malformed(format!("entry {name:?} lacks data_offsets")))?,
        "data_offsets",
        name,
    )?;
    let [begin, end] = offsets[..] else {
        return Err(malformed(format!("data_offsets of {name:?} must have two elements")));
    };
    if begin > end {
        return Err(malformed(format!("data_offsets of {name:?} are reversed")));
    }
    let expected = shape
        .iter()
        .try_fold(dtype.bytes_per_element() as u64, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| malformed(format!("shape of {name:?} overflows")))?;
    if end - begin != expected {
        return Err(malformed(format!(
            "{name:?} spans {} bytes but its shape and dtype need {expected}",
            end - begin
        )));
    }
    Ok(TensorMeta {
        name: name.to_string(),
        dtype,
        shape,
        data_offsets: (begin, end),
    })
}

pub(crate) fn parse_header_json(json: &[u8], data_len: u64) -> Result<ShardHeader> {
    let text = std::str::from_utf8(json).map_err(|e| malformed(format!("header is not UTF-8: {e}")))?;
    let UniqueEntries(entries) =
        serde_json::from_str(text).map_err(|e| malformed(format!("header is not a JSON object: {e}")))?;

    let mut header = ShardHeader {
        header_len: json.len() as u64,
        data_len,
        ..ShardHeader::default()
    };
    for (name, value) in entries {
        if name == METADATA_KEY {
            let obj = value
                .as_object()
                .ok_or_else(|| malformed("__metadata__ is not an object"))?;
            let map = obj
                .iter()
                .map(|(k, v)| {
                    v.as_str()
                        .map(|s| (k.clone(), s.to_string()))
                        .ok_or_else(|| malformed(format!("__metadata__ value for {k:?} is not a string")))
                })
                .collect::<Result<_>>()?;
            header.metadata = Some(map);
            continue;
        }
        let meta = parse_entry(&name, &value)?;
        header.tensors.insert(name, meta);
    }

    let mut ranges: Vec<&TensorMeta> = header
        .tensors
        .values()
        .filter(|m| m.byte_len() > 0)
        .collect();
    ranges.sort_by_key(|m| m.data_offsets);
    for pair in ranges.windows(2) {
        if pair[1].data_offsets.0 < pair[0].data_offsets.1 {
            return Err(Error::OverlappingRanges {
                first: pair[0].name.clone(),
                second: pair[1].name.clone(),
            });
        }
    }
    for m in header.tensors.values() {
        if m.data_offsets.1 > data_len {
            return Err(Error::OutOfBounds {
                name: m.name.clone(),
                end: m.data_offsets.1,
                data_len,
            });
        }
    }
    Ok(header)
}

/// Serializes a header (length prefix plus JSON padded with spaces to a multiple of 8).
pub(crate) fn encode_header(tensors: &[TensorMeta], metadata: Option<&BTreeMap<String, String>>) -> Vec<u8> {
    let mut obj = serde_json::Map::new();
    if let Some(md) = metadata {
        let md: serde_json::Map<String, Value> =
            md.iter().map(|(k, v)| (k.clone(), Value::String(v.clone()))).collect();
        obj.insert(METADATA_KEY.to_string(), Value::Object(md));
    }
    for t in tensors {
        let mut e = serde_json::Map::new();
        e.insert("dtype".into(), Value::String(t.dtype.as_str().into()));
        e.insert("shape".into(), Value::from(t.shape.clone()));
        e.insert(
            "data_offsets".into(),
            Value::from(vec![t.data_offsets.0, t.data_offsets.1]),
        );
        obj.insert(t.name.clone(), Value::Object(e));
    }
    // serde_json's default map is sorted, so the text is independent of input order.
    let mut json = serde_json::to_vec(&Value::Object(obj)).expect("header serializes");
    while !json.len().is_multiple_of(8) {
        json.push(b' ');
    }
    let mut out = Vec::with_capacity(8 + json.len());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out
}
