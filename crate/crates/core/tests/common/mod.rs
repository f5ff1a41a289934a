#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;
use tvmerge_core::{write_checkpoint, CheckpointHandle, DType, PendingTensor, ShardPolicy, TensorData};

pub fn tensor(name: &str, dtype: DType, shape: &[u64], values: Vec<f32>) -> PendingTensor {
    PendingTensor {
        name: name.into(),
        dtype,
        shape: shape.to_vec(),
        data: TensorData::F32(values),
    }
}

pub fn write(dir: &Path, tensors: Vec<PendingTensor>) -> CheckpointHandle {
    write_checkpoint(tensors, dir, &ShardPolicy::default()).unwrap()
}

pub fn write_sharded(dir: &Path, tensors: Vec<PendingTensor>, limit: u64) -> CheckpointHandle {
    write_checkpoint(tensors, dir, &ShardPolicy::with_max_shard_bytes(limit)).unwrap()
}

/// Tensor name to stored bytes, read back through a handle.
pub fn payloads(h: &CheckpointHandle) -> BTreeMap<String, Vec<u8>> {
    h.names()
        .map(|n| (n.to_string(), h.read_tensor(n).unwrap().bytes))
        .collect()
}

/// Tensor name to decoded values.
pub fn values(h: &CheckpointHandle) -> BTreeMap<String, Vec<f32>> {
    h.names()
        .map(|n| (n.to_string(), tvmerge_core::decode_f32(&h.read_tensor(n).unwrap())))
        .collect()
}

/// Random architecture: 2..=12 tensors, up to `max_elems` elements each.
pub struct Arch {
    pub tensors: Vec<(String, DType, Vec<u64>)>,
}

pub fn random_arch(rng: &mut ChaCha8Rng, max_elems: u64) -> Arch {
    let count = rng.gen_range(2..=12);
    let tensors = (0..count)
        .map(|i| {
            let dtype = if rng.gen_bool(0.5) { DType::BF16 } else { DType::F32 };
            let shape = match rng.gen_range(0..3) {
                0 => vec![rng.gen_range(1..=max_elems)],
                1 => {
                    let rows = rng.gen_range(1..=64);
                    vec![rows, rng.gen_range(1..=(max_elems / rows).max(1))]
                }
                _ => vec![],
            };
            let name = match i % 4 {
                0 => format!("model.layers.{i}.self_attn.q_proj.weight"),
                1 => format!("model.layers.{i}.mlp.down_proj.weight"),
                2 => format!("model.layers.{i}.input_layernorm.weight"),
                _ => format!("lm_head.{i}.weight"),
            };
            (name, dtype, shape)
        })
        .collect();
    Arch { tensors }
}

/// A checkpoint of `arch` whose values are `anchor + noise·scale`.
pub fn random_checkpoint(dir: &Path, arch: &Arch, rng: &mut ChaCha8Rng, scale: f32) -> CheckpointHandle {
    let tensors = arch
        .tensors
        .iter()
        .map(|(name, dtype, shape)| {
            let n: u64 = shape.iter().product();
            let vals = (0..n).map(|_| rng.gen_range(-1.0f32..1.0) * scale).collect();
            tensor(name, *dtype, shape, vals)
        })
        .collect();
    write(dir, tensors)
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

// ---------------------------------------------------------------------------
// Reference merge: reads whole shard files with plain serde_json, decodes with
// its own bit manipulation, narrows with the `half` crate, and materializes
// every tensor in memory. Shares no code path with the streaming merge.
// ---------------------------------------------------------------------------

pub struct RefTensor {
    pub dtype: String,
    pub shape: Vec<u64>,
    pub values: Vec<f32>,
}

fn ref_decode(dtype: &str, bytes: &[u8]) -> Vec<f32> {
    match dtype {
        "F32" => bytes
            .chunks(4)
            .map(|c| f32::from_bits(u32::from_le_bytes(c.try_into().unwrap())))
            .collect(),
        "BF16" => bytes
            .chunks(2)
            .map(|c| f32::from_bits((u32::from(c[0]) | u32::from(c[1]) << 8) << 16))
            .collect(),
        "F16" => bytes
            .chunks(2)
            .map(|c| half::f16::from_bits(u16::from_le_bytes([c[0], c[1]])).to_f32())
            .collect(),
        other => panic!("reference decoder: {other}"),
    }
}

pub fn ref_encode(dtype: &str, values: &[f32]) -> Vec<u8> {
    let mut out = Vec::new();
    for &v in values {
        match dtype {
            "F32" => out.extend_from_slice(&v.to_bits().to_le_bytes()),
            "BF16" => out.extend_from_slice(&half::bf16::from_f32(v).to_bits().to_le_bytes()),
            "F16" => out.extend_from_slice(&half::f16::from_f32(v).to_bits().to_le_bytes()),
            other => panic!("reference encoder: {other}"),
        }
    }
    out
}

/// Loads every tensor of a checkpoint directory by reading whole files.
pub fn ref_load(dir: &Path) -> BTreeMap<String, RefTensor> {
    let mut out = BTreeMap::new();
    for entry in std::fs::read_dir(dir).unwrap() {
        let p = entry.unwrap().path();
        if p.extension().is_none_or(|e| e != "safetensors") {
            continue;
        }
        let bytes = std::fs::read(&p).unwrap();
        let n = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
        let header: Value = serde_json::from_slice(&bytes[8..8 + n]).unwrap();
        let data = &bytes[8 + n..];
        for (name, e) in header.as_object().unwrap() {
            if name == "__metadata__" {
                continue;
            }
            let dtype = e["dtype"].as_str().unwrap().to_string();
            let shape: Vec<u64> = e["shape"].as_array().unwrap().iter().map(|x| x.as_u64().unwrap()).collect();
            let off = e["data_offsets"].as_array().unwrap();
            let (b, en) = (off[0].as_u64().unwrap() as usize, off[1].as_u64().unwrap() as usize);
            let values = ref_decode(&dtype, &data[b..en]);
            out.insert(name.clone(), RefTensor { dtype, shape, values });
        }
    }
    out
}

/// Full-materialization merge: name to (dtype, encoded bytes).
pub fn ref_merge(base: &Path, instruct: &Path, domain: &Path, lambda_domain: f32, lambda_instruct: f32) -> BTreeMap<String, (String, Vec<u8>)> {
    let (b, i, d) = (ref_load(base), ref_load(instruct), ref_load(domain));
    d.iter()
        .map(|(name, dt)| {
            let (bt, it) = (&b[name], &i[name]);
            let merged: Vec<f32> = (0..dt.values.len())
                .map(|k| {
                    let (gp, gi, dp) = (bt.values[k], it.values[k], dt.values[k]);
                    let with_instruct = dp + lambda_instruct * (gi - gp);
                    if lambda_domain == 1.0 {
                        with_instruct
                    } else {
                        with_instruct + (lambda_domain - 1.0) * (dp - gp)
                    }
                })
                .collect();
            (name.clone(), (dt.dtype.clone(), ref_encode(&dt.dtype, &merged)))
        })
        .collect()
}

/// Same shape as [`ref_merge`], read from a written checkpoint.
pub fn stored(h: &CheckpointHandle) -> BTreeMap<String, (String, Vec<u8>)> {
    h.names()
        .map(|n| {
            let v = h.read_tensor(n).unwrap();
            (n.to_string(), (v.meta.dtype.as_str().to_string(), v.bytes))
        })
        .collect()
}
