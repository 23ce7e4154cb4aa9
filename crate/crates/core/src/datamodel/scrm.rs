//! SCRM binary matrix format.
//!
//! Layout, little-endian throughout:
//!
//! | offset | size | field                       |
//! |--------|------|-----------------------------|
//! | 0      | 4    | magic `b"SCRM"`             |
//! | 4      | 2    | version, `u16` = 1          |
//! | 6      | 8    | rows, `u64`                 |
//! | 14     | 8    | cols, `u64`                 |
//! | 22     | 4·rows·cols | row-major `f32` values |
//!
//! Values are always stored as `f32`; wider scalars are rounded on save.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::scalar::Scalar;

pub const MAGIC: &[u8; 4] = b"SCRM";
pub const VERSION: u16 = 1;
pub const HEADER_LEN: usize = 22;

pub fn encode<T: Scalar>(m: &Matrix<T>) -> Vec<u8> {
    let mut buf = Vec::with_capacity(HEADER_LEN + 4 * m.data().len());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(m.rows() as u64).to_le_bytes());
    buf.extend_from_slice(&(m.cols() as u64).to_le_bytes());
    for v in m.data() {
        buf.extend_from_slice(&v.as_f32().to_le_bytes());
    }
    buf
}

pub fn decode<T: Scalar>(bytes: &[u8], path: &Path) -> Result<Matrix<T>> {
    let format = |msg: &str| Error::Format {
        path: path.to_path_buf(),
        msg: msg.to_string(),
    };
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(format("missing SCRM magic"));
    }
    if bytes.len() < HEADER_LEN {
        return Err(Error::Truncation {
            path: path.to_path_buf(),
            expected: HEADER_LEN as u64,
            found: bytes.len() as u64,
        });
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(format(&format!("unsupported version {version}")));
    }
    let rows = u64::from_le_bytes(bytes[6..14].try_into().unwrap());
    let cols = u64::from_le_bytes(bytes[14..22].try_into().unwrap());
    let expected = rows
        .checked_mul(cols)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| format("dimensions overflow"))?;
    let payload = &bytes[HEADER_LEN..];
    let found = payload.len() as u64;
    if found < expected {
        return Err(Error::Truncation {
            path: path.to_path_buf(),
            expected,
            found,
        });
    }
    if found > expected {
        return Err(format(&format!(
            "{} trailing bytes after payload",
            found - expected
        )));
    }
    let mut data = Vec::with_capacity((rows * cols) as usize);
    for (i, chunk) in payload.chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes(chunk.try_into().unwrap());
        if !v.is_finite() {
            return Err(Error::Value(format!(
                "non-finite value {v} at index {i} in {}",
                path.display()
            )));
        }
        data.push(T::of(v as f64));
    }
    Matrix::new(rows as usize, cols as usize, data)
}

pub fn save_matrix<T: Scalar>(m: &Matrix<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&encode(m)).map_err(|e| Error::io(path, e))
}

pub fn load_matrix<T: Scalar>(path: impl AsRef<Path>) -> Result<Matrix<T>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}
