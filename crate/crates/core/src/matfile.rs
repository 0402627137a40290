//! Binary matrix container shared by embedding checkpoints and image features.
//!
//! Layout: 8-byte magic, `u32` version, `u32` row count, `u32` column count,
//! then row-major little-endian `f32` values.

use std::path::Path;

use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;
const HEADER_LEN: usize = 8 + 4 + 4 + 4;

pub fn encode_matrix(magic: &[u8; 8], rows: usize, cols: usize, data: &[f32]) -> Vec<u8> {
    debug_assert_eq!(rows * cols, data.len());
    let mut buf = Vec::with_capacity(HEADER_LEN + data.len() * 4);
    buf.extend_from_slice(magic);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(rows as u32).to_le_bytes());
    buf.extend_from_slice(&(cols as u32).to_le_bytes());
    for v in data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf
}

pub fn write_matrix(path: &Path, magic: &[u8; 8], rows: usize, cols: usize, data: &[f32]) -> Result<()> {
    std::fs::write(path, encode_matrix(magic, rows, cols, data)).map_err(|e| Error::io(path, e))
}

/// Decode a matrix, returning `(rows, cols, values)`.
pub fn decode_matrix(path: &Path, magic: &[u8; 8], bytes: &[u8]) -> Result<(usize, usize, Vec<f32>)> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            expected: HEADER_LEN as u64,
            found: bytes.len() as u64,
        });
    }
    if &bytes[..8] != magic {
        return Err(Error::Format {
            path: path.to_path_buf(),
            msg: format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(&bytes[..8]),
                String::from_utf8_lossy(magic)
            ),
        });
    }
    let word = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap());
    let version = word(8);
    if version != FORMAT_VERSION {
        return Err(Error::Version {
            path: path.to_path_buf(),
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let rows = word(12) as usize;
    let cols = word(16) as usize;
    let expected = HEADER_LEN as u64 + rows as u64 * cols as u64 * 4;
    if bytes.len() as u64 != expected {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            expected,
            found: bytes.len() as u64,
        });
    }
    let data = bytes[HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((rows, cols, data))
}

pub fn read_matrix(path: &Path, magic: &[u8; 8]) -> Result<(usize, usize, Vec<f32>)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_matrix(path, magic, &bytes)
}
