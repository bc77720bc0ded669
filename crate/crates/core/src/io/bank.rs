//! `KPB1` descriptor banks: a 20-byte header (magic, u32 version, u32 dim,
//! u64 count) followed by `count × dim` little-endian `f32` values.

use std::path::Path;

use crate::error::{Error, Result};
use crate::retrieval::quantize;

pub const BANK_MAGIC: &[u8; 4] = b"KPB1";
pub const BANK_VERSION: u32 = 1;
const HEADER: usize = 20;

/// Rows further than this from unit norm are rejected on load; closer ones
/// beyond the storage tolerance are renormalized.
pub const BANK_REJECT_TOLERANCE: f64 = 1e-3;
pub const BANK_RENORM_TOLERANCE: f64 = 1e-6;

pub fn encode_bank(dim: usize, rows: &[f64]) -> Result<Vec<u8>> {
    if dim == 0 || !rows.len().is_multiple_of(dim) {
        return Err(Error::Shape(format!("{} values do not form rows of dim {dim}", rows.len())));
    }
    let dim32 = u32::try_from(dim).map_err(|_| Error::Shape("dim exceeds u32".into()))?;
    let count = (rows.len() / dim) as u64;
    let mut out = Vec::with_capacity(HEADER + rows.len() * 4);
    out.extend_from_slice(BANK_MAGIC);
    out.extend_from_slice(&BANK_VERSION.to_le_bytes());
    out.extend_from_slice(&dim32.to_le_bytes());
    out.extend_from_slice(&count.to_le_bytes());
    for &v in rows {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    Ok(out)
}

fn format_err(file: &str, offset: usize, message: impl Into<String>) -> Error {
    Error::Format {
        file: file.to_string(),
        offset: offset as u64,
        message: message.into(),
    }
}

/// Decodes a bank into `(dim, rows)`, renormalizing slightly off-unit rows.
pub fn decode_bank(bytes: &[u8], file: &str) -> Result<(usize, Vec<f64>)> {
    if bytes.len() < HEADER {
        return Err(format_err(file, bytes.len(), format!("header needs {HEADER} bytes")));
    }
    if &bytes[0..4] != BANK_MAGIC {
        return Err(format_err(file, 0, "bad magic, expected KPB1"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != BANK_VERSION {
        return Err(format_err(file, 4, format!("unsupported version {version}")));
    }
    let dim = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    if dim == 0 {
        return Err(format_err(file, 8, "dim must be ≥ 1"));
    }
    let count = u64::from_le_bytes(bytes[12..20].try_into().unwrap());
    let expected = (count as u128) * (dim as u128) * 4;
    let actual = (bytes.len() - HEADER) as u128;
    if expected != actual {
        let offset = HEADER as u128 + expected.min(actual);
        return Err(format_err(
            file,
            offset as usize,
            format!("payload has {actual} bytes, header implies {expected}"),
        ));
    }
    let mut rows = Vec::with_capacity(count as usize * dim);
    for (i, chunk) in bytes[HEADER..].chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes(chunk.try_into().unwrap());
        if !v.is_finite() {
            return Err(format_err(file, HEADER + 4 * i, "non-finite value"));
        }
        rows.push(v as f64);
    }
    for (r, row) in rows.chunks_exact_mut(dim).enumerate() {
        let n = crate::linalg::norm(row);
        let dev = (n - 1.0).abs();
        if dev > BANK_REJECT_TOLERANCE {
            return Err(format_err(file, HEADER + 4 * r * dim, format!("row {r} has norm {n}")));
        }
        if dev > BANK_RENORM_TOLERANCE {
            row.iter_mut().for_each(|v| *v /= n);
            let q = quantize(row);
            row.copy_from_slice(&q);
        }
    }
    Ok((dim, rows))
}

pub fn write_bank(path: impl AsRef<Path>, dim: usize, rows: &[f64]) -> Result<()> {
    super::write_atomic(path, &encode_bank(dim, rows)?)
}

pub fn read_bank(path: impl AsRef<Path>) -> Result<(usize, Vec<f64>)> {
    let path = path.as_ref();
    decode_bank(&super::read_bytes(path)?, &path.display().to_string())
}
