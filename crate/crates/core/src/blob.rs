//! `SEALEMB1` binary matrix container.
//!
//! Layout (all little-endian): 8-byte ASCII magic `SEALEMB1`, `u32` version,
//! `u64` rows, `u64` cols, `rows·cols` `f32` values in row-major order, and a
//! trailing `u64` FNV-1a digest of the payload bytes.

use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::Array2;

use crate::error::{Result, SealError};

pub const MAGIC: &[u8; 8] = b"SEALEMB1";
pub const BLOB_VERSION: u32 = 1;
const HEADER_LEN: usize = 8 + 4 + 8 + 8;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// 64-bit FNV-1a.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h = FNV_OFFSET;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingBlob {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f32>,
}

impl EmbeddingBlob {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(SealError::DimensionMismatch(format!(
                "blob payload has {} values, expected {rows}x{cols}",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    /// Narrows an `f64` matrix to `f32`.
    pub fn from_matrix(m: &Array2<f64>) -> Self {
        let (rows, cols) = m.dim();
        let data = m.iter().map(|&v| v as f32).collect();
        Self { rows, cols, data }
    }

    pub fn to_matrix(&self) -> Array2<f64> {
        Array2::from_shape_fn((self.rows, self.cols), |(r, c)| self.data[r * self.cols + c] as f64)
    }

    fn payload_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.data.len() * 4);
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    /// Digest of the payload, as stored in the trailer.
    pub fn digest(&self) -> u64 {
        fnv1a64(&self.payload_bytes())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let payload = self.payload_bytes();
        let mut out = Vec::with_capacity(HEADER_LEN + payload.len() + 8);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&BLOB_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.rows as u64).to_le_bytes());
        out.extend_from_slice(&(self.cols as u64).to_le_bytes());
        out.extend_from_slice(&payload);
        out.extend_from_slice(&fnv1a64(&payload).to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN + 8 {
            return Err(SealError::Malformed(format!("blob truncated: {} bytes", bytes.len())));
        }
        if &bytes[..8] != MAGIC {
            return Err(SealError::Malformed("bad blob magic".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != BLOB_VERSION {
            return Err(SealError::Version {
                expected: BLOB_VERSION,
                found: version,
            });
        }
        let rows = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let cols = u64::from_le_bytes(bytes[20..28].try_into().expect("8 bytes")) as usize;
        let n = rows
            .checked_mul(cols)
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| SealError::Malformed("blob dimensions overflow".into()))?;
        if bytes.len() != HEADER_LEN + n + 8 {
            return Err(SealError::Malformed(format!(
                "blob length {} does not match {rows}x{cols} header",
                bytes.len()
            )));
        }
        let payload = &bytes[HEADER_LEN..HEADER_LEN + n];
        let stored = u64::from_le_bytes(bytes[HEADER_LEN + n..].try_into().expect("8 bytes"));
        let actual = fnv1a64(payload);
        if stored != actual {
            return Err(SealError::Digest(format!("blob payload {actual:016x} != trailer {stored:016x}")));
        }
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        Ok(Self { rows, cols, data })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn read(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(SealError::MissingFile(path.to_path_buf()));
        }
        let bytes = fs::read(path).map_err(|e| SealError::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// Writes via a sibling temporary file and rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| SealError::io(dir, e))?;
        }
    }
    let tmp = path.with_extension(format!(
        "{}.tmp",
        path.extension().and_then(|e| e.to_str()).unwrap_or("")
    ));
    {
        let mut f = fs::File::create(&tmp).map_err(|e| SealError::io(&tmp, e))?;
        f.write_all(bytes).map_err(|e| SealError::io(&tmp, e))?;
        f.sync_all().map_err(|e| SealError::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| SealError::io(path, e))
}
