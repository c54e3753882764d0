//! On-disk formats. Everything is little-endian.
//!
//! An embedding file (`CEM1`) is a 23-byte header, a row-major payload and a
//! CRC32 of the payload:
//!
//! ```text
//! offset  size  field
//!      0     4  magic "CEM1"
//!      4     2  version (1)
//!      6     1  dtype: 0 = f32, 1 = f64, 2 = u32 (label vectors, cols = 1)
//!      7     8  rows
//!     15     8  cols
//!     23     *  payload, rows·cols·size(dtype) bytes
//!      .     4  CRC32 (IEEE) of the payload
//! ```
//!
//! f32 payloads are widened to f64 in memory and narrowed again on write, so
//! a file round-trips bit-exactly as long as it is written back with its
//! declared dtype.

mod config;
mod container;

pub use config::{parse_config, read_config, render_config, write_config, RunConfig, CONFIG_KEYS};
pub use container::{
    decode_model, decode_stats, encode_model, encode_stats, read_model, read_stats, write_model, write_stats,
    MODEL_MAGIC, STATS_MAGIC,
};

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{CondaError, Result};
use crate::DenseMatrix;

pub const EMB_MAGIC: [u8; 4] = *b"CEM1";
pub const EMB_VERSION: u16 = 1;
pub const EMB_HEADER_LEN: usize = 23;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
    U32,
}

impl Dtype {
    pub fn code(self) -> u8 {
        match self {
            Dtype::F32 => 0,
            Dtype::F64 => 1,
            Dtype::U32 => 2,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(Dtype::F32),
            1 => Ok(Dtype::F64),
            2 => Ok(Dtype::U32),
            c => Err(CondaError::Format(format!("unknown dtype code {c}"))),
        }
    }

    pub fn size(self) -> usize {
        match self {
            Dtype::F32 | Dtype::U32 => 4,
            Dtype::F64 => 8,
        }
    }
}

/// Decoded embedding block before interpretation.
#[derive(Debug, Clone, PartialEq)]
pub enum EmbData {
    Matrix { dtype: Dtype, matrix: DenseMatrix },
    Labels(Vec<u32>),
}

fn header(dtype: Dtype, rows: usize, cols: usize) -> [u8; EMB_HEADER_LEN] {
    let mut h = [0u8; EMB_HEADER_LEN];
    h[..4].copy_from_slice(&EMB_MAGIC);
    h[4..6].copy_from_slice(&EMB_VERSION.to_le_bytes());
    h[6] = dtype.code();
    h[7..15].copy_from_slice(&(rows as u64).to_le_bytes());
    h[15..23].copy_from_slice(&(cols as u64).to_le_bytes());
    h
}

fn finish(out: &mut Vec<u8>, payload_start: usize) {
    let crc = crc32fast::hash(&out[payload_start..]);
    out.extend_from_slice(&crc.to_le_bytes());
}

/// Appends a matrix block. f32 narrowing rejects values that are not finite
/// after conversion.
pub fn encode_matrix(out: &mut Vec<u8>, matrix: &DenseMatrix, dtype: Dtype) -> Result<()> {
    out.extend_from_slice(&header(dtype, matrix.rows(), matrix.cols()));
    let start = out.len();
    match dtype {
        Dtype::F64 => {
            for v in matrix.as_slice() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Dtype::F32 => {
            for &v in matrix.as_slice() {
                let n = v as f32;
                if v.is_finite() && !n.is_finite() {
                    return Err(CondaError::InvalidInput(format!("{v} overflows f32")));
                }
                out.extend_from_slice(&n.to_le_bytes());
            }
        }
        Dtype::U32 => return Err(CondaError::InvalidInput("matrices are stored as f32 or f64".into())),
    }
    finish(out, start);
    Ok(())
}

pub fn encode_labels(out: &mut Vec<u8>, labels: &[usize]) -> Result<()> {
    out.extend_from_slice(&header(Dtype::U32, labels.len(), 1));
    let start = out.len();
    for &y in labels {
        let v = u32::try_from(y).map_err(|_| CondaError::InvalidInput(format!("label {y} exceeds u32")))?;
        out.extend_from_slice(&v.to_le_bytes());
    }
    finish(out, start);
    Ok(())
}

fn truncated(needed: usize, found: usize) -> CondaError {
    CondaError::Truncated {
        needed: needed as u64,
        found: found as u64,
    }
}

/// Decodes one block from the front of `bytes`, returning it and the number
/// of bytes consumed.
pub fn decode_block(bytes: &[u8]) -> Result<(EmbData, usize)> {
    if bytes.len() < 4 {
        return Err(truncated(EMB_HEADER_LEN, bytes.len()));
    }
    if bytes[..4] != EMB_MAGIC {
        let mut found = [0u8; 4];
        found.copy_from_slice(&bytes[..4]);
        return Err(CondaError::BadMagic {
            expected: EMB_MAGIC,
            found,
        });
    }
    if bytes.len() < EMB_HEADER_LEN {
        return Err(truncated(EMB_HEADER_LEN, bytes.len()));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != EMB_VERSION {
        return Err(CondaError::Format(format!(
            "unsupported embedding file version {version}"
        )));
    }
    let dtype = Dtype::from_code(bytes[6])?;
    let rows = u64::from_le_bytes(bytes[7..15].try_into().expect("8 bytes"));
    let cols = u64::from_le_bytes(bytes[15..23].try_into().expect("8 bytes"));
    if dtype == Dtype::U32 && cols != 1 {
        return Err(CondaError::Format(format!(
            "label block must have one column, found {cols}"
        )));
    }
    let payload_len = rows
        .checked_mul(cols)
        .and_then(|n| n.checked_mul(dtype.size() as u64))
        .and_then(|n| usize::try_from(n).ok())
        .ok_or_else(|| CondaError::Format(format!("{rows}x{cols} block is too large")))?;
    let total = EMB_HEADER_LEN + payload_len + 4;
    if bytes.len() < total {
        return Err(truncated(total, bytes.len()));
    }
    let payload = &bytes[EMB_HEADER_LEN..EMB_HEADER_LEN + payload_len];
    let stored = u32::from_le_bytes(bytes[total - 4..total].try_into().expect("4 bytes"));
    let computed = crc32fast::hash(payload);
    if stored != computed {
        return Err(CondaError::CrcMismatch { stored, computed });
    }
    let (rows, cols) = (rows as usize, cols as usize);
    let data = match dtype {
        Dtype::F64 => {
            let v = payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            EmbData::Matrix {
                dtype,
                matrix: DenseMatrix::from_vec(rows, cols, v)?,
            }
        }
        Dtype::F32 => {
            let v = payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                .collect();
            EmbData::Matrix {
                dtype,
                matrix: DenseMatrix::from_vec(rows, cols, v)?,
            }
        }
        Dtype::U32 => EmbData::Labels(
            payload
                .chunks_exact(4)
                .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect(),
        ),
    };
    Ok((data, total))
}

fn decode_whole(bytes: &[u8]) -> Result<EmbData> {
    let (data, used) = decode_block(bytes)?;
    if used != bytes.len() {
        return Err(CondaError::Format(format!(
            "{} trailing bytes after block",
            bytes.len() - used
        )));
    }
    Ok(data)
}

pub fn decode_matrix(bytes: &[u8]) -> Result<(DenseMatrix, Dtype)> {
    match decode_whole(bytes)? {
        EmbData::Matrix { dtype, matrix } => Ok((matrix, dtype)),
        EmbData::Labels(_) => Err(CondaError::Format("expected a matrix block, found labels".into())),
    }
}

pub fn decode_labels(bytes: &[u8]) -> Result<Vec<usize>> {
    match decode_whole(bytes)? {
        EmbData::Labels(v) => Ok(v.into_iter().map(|y| y as usize).collect()),
        EmbData::Matrix { .. } => Err(CondaError::Format("expected a label block, found a matrix".into())),
    }
}

/// Writes through a sibling temporary file and renames it into place.
pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = Path::new(&tmp);
    {
        let mut f = fs::File::create(tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(tmp, path)?;
    Ok(())
}

pub fn write_matrix(path: impl AsRef<Path>, matrix: &DenseMatrix, dtype: Dtype) -> Result<()> {
    let mut out = Vec::with_capacity(EMB_HEADER_LEN + matrix.as_slice().len() * dtype.size() + 4);
    encode_matrix(&mut out, matrix, dtype)?;
    write_atomic(path.as_ref(), &out)
}

pub fn read_matrix(path: impl AsRef<Path>) -> Result<(DenseMatrix, Dtype)> {
    decode_matrix(&fs::read(path)?)
}

pub fn write_labels(path: impl AsRef<Path>, labels: &[usize]) -> Result<()> {
    let mut out = Vec::with_capacity(EMB_HEADER_LEN + labels.len() * 4 + 4);
    encode_labels(&mut out, labels)?;
    write_atomic(path.as_ref(), &out)
}

pub fn read_labels(path: impl AsRef<Path>) -> Result<Vec<usize>> {
    decode_labels(&fs::read(path)?)
}

/// CRC32 of a whole file, as reported in manifests.
pub fn file_crc(path: impl AsRef<Path>) -> Result<u32> {
    Ok(crc32fast::hash(&fs::read(path)?))
}
