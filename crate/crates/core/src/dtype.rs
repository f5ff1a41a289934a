//! Element types and their codecs to and from 32-bit working precision.
//!
//! All arithmetic in this crate happens on `f32`. Stored values are widened
//! on read and narrowed exactly once on write, rounding to nearest with ties
//! to even.

use std::fmt;
use std::str::FromStr;

use crate::container::TensorView;
use crate::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum DType {
    F32,
    F16,
    BF16,
}

impl DType {
    pub const ALL: [DType; 3] = [DType::F32, DType::F16, DType::BF16];

    pub const fn bytes_per_element(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F16 | DType::BF16 => 2,
        }
    }

    /// Tag as written in shard headers.
    pub const fn as_str(self) -> &'static str {
        match self {
            DType::F32 => "F32",
            DType::F16 => "F16",
            DType::BF16 => "BF16",
        }
    }
}

impl fmt::Display for DType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DType {
    type Err = Error;

    /// Header tags are case-sensitive; anything else is rejected.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "F32" => Ok(DType::F32),
            "F16" => Ok(DType::F16),
            "BF16" => Ok(DType::BF16),
            other => Err(Error::UnknownDType(other.to_string())),
        }
    }
}

impl serde::Serialize for DType {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(self.as_str())
    }
}

/// Widens a bfloat16 bit pattern: the stored bits become the high half of an f32.
#[inline]
pub fn bf16_to_f32(bits: u16) -> f32 {
    f32::from_bits(u32::from(bits) << 16)
}

/// Narrows to bfloat16 with round-to-nearest, ties-to-even.
///
/// Overflow rounds up into the infinity encoding. NaN keeps its sign and the
/// upper payload bits; if truncation would empty the mantissa the quiet bit is
/// set so the result is still a NaN.
#[inline]
pub fn f32_to_bf16(value: f32) -> u16 {
    let bits = value.to_bits();
    if value.is_nan() {
        let upper = (bits >> 16) as u16;
        return if upper & 0x007F == 0 { upper | 0x0040 } else { upper };
    }
    let lsb = (bits >> 16) & 1;
    (bits.wrapping_add(0x7FFF + lsb) >> 16) as u16
}

#[inline]
pub fn f16_to_f32(bits: u16) -> f32 {
    half::f16::from_bits(bits).to_f32()
}

#[inline]
pub fn f32_to_f16(value: f32) -> u16 {
    half::f16::from_f32(value).to_bits()
}

/// Decodes little-endian stored elements, appending to `out`.
///
/// `bytes.len()` must be a multiple of the element width; a trailing partial
/// element is ignored.
pub fn decode_into(bytes: &[u8], dtype: DType, out: &mut Vec<f32>) {
    out.reserve(bytes.len() / dtype.bytes_per_element());
    match dtype {
        DType::F32 => out.extend(
            bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])),
        ),
        DType::BF16 => out.extend(
            bytes
                .chunks_exact(2)
                .map(|c| bf16_to_f32(u16::from_le_bytes([c[0], c[1]]))),
        ),
        DType::F16 => out.extend(
            bytes
                .chunks_exact(2)
                .map(|c| f16_to_f32(u16::from_le_bytes([c[0], c[1]]))),
        ),
    }
}

/// Encodes values as little-endian `target` elements, appending to `out`.
pub fn encode_into(values: &[f32], target: DType, out: &mut Vec<u8>) {
    out.reserve(values.len() * target.bytes_per_element());
    match target {
        DType::F32 => {
            for v in values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        DType::BF16 => {
            for &v in values {
                out.extend_from_slice(&f32_to_bf16(v).to_le_bytes());
            }
        }
        DType::F16 => {
            for &v in values {
                out.extend_from_slice(&f32_to_f16(v).to_le_bytes());
            }
        }
    }
}

/// Decodes a whole tensor view to 32-bit values.
pub fn decode_f32(view: &TensorView) -> Vec<f32> {
    let mut out = Vec::new();
    decode_into(&view.bytes, view.meta.dtype, &mut out);
    out
}

pub fn encode_from_f32(values: &[f32], target: DType) -> Vec<u8> {
    let mut out = Vec::new();
    encode_into(values, target, &mut out);
    out
}
