//! `KPF1` dense tensors: magic, u32 version, u32 rank, `rank` u64 extents,
//! then little-endian `f64` values in row-major order. Used for feature maps
//! (`N × c × h × w`) and raw encoder inputs (`N × m`).

use std::path::Path;

use crate::error::{Error, Result};

pub const TENSOR_MAGIC: &[u8; 4] = b"KPF1";
pub const TENSOR_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != values.len() {
            return Err(Error::Shape(format!("shape {shape:?} holds {n} values, got {}", values.len())));
        }
        Ok(Self { shape, values })
    }
}

pub fn encode_tensor(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + 8 * t.shape.len() + 8 * t.values.len());
    out.extend_from_slice(TENSOR_MAGIC);
    out.extend_from_slice(&TENSOR_VERSION.to_le_bytes());
    out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
    for &s in &t.shape {
        out.extend_from_slice(&(s as u64).to_le_bytes());
    }
    for &v in &t.values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn format_err(file: &str, offset: usize, message: impl Into<String>) -> Error {
    Error::Format {
        file: file.to_string(),
        offset: offset as u64,
        message: message.into(),
    }
}

pub fn decode_tensor(bytes: &[u8], file: &str) -> Result<Tensor> {
    if bytes.len() < 12 {
        return Err(format_err(file, bytes.len(), "header needs 12 bytes"));
    }
    if &bytes[0..4] != TENSOR_MAGIC {
        return Err(format_err(file, 0, "bad magic, expected KPF1"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != TENSOR_VERSION {
        return Err(format_err(file, 4, format!("unsupported version {version}")));
    }
    let rank = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let header = 12 + 8 * rank;
    if bytes.len() < header {
        return Err(format_err(file, bytes.len(), format!("header of rank {rank} truncated")));
    }
    let mut shape = Vec::with_capacity(rank);
    let mut count: u128 = 1;
    for r in 0..rank {
        let at = 12 + 8 * r;
        let s = u64::from_le_bytes(bytes[at..at + 8].try_into().unwrap());
        count *= s as u128;
        shape.push(s as usize);
    }
    let expected = count * 8;
    let actual = (bytes.len() - header) as u128;
    if expected != actual {
        return Err(format_err(
            file,
            header + expected.min(actual) as usize,
            format!("payload has {actual} bytes, shape implies {expected}"),
        ));
    }
    let mut values = Vec::with_capacity(count as usize);
    for (i, c) in bytes[header..].chunks_exact(8).enumerate() {
        let v = f64::from_le_bytes(c.try_into().unwrap());
        if !v.is_finite() {
            return Err(format_err(file, header + 8 * i, "non-finite value"));
        }
        values.push(v);
    }
    Ok(Tensor { shape, values })
}

pub fn write_tensor(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    super::write_atomic(path, &encode_tensor(t))
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    decode_tensor(&super::read_bytes(path)?, &path.display().to_string())
}
