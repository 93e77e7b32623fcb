//! Little-endian raw array files and JSON helpers shared by the on-disk formats.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};

pub fn write_f32_le(path: &Path, values: &[f32]) -> Result<()> {
    let mut buf = Vec::with_capacity(values.len() * 4);
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, buf).map_err(|e| Error::storage(path, e))
}

pub fn read_f32_le(path: &Path, expected_len: usize) -> Result<Vec<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::storage(path, e))?;
    if bytes.len() != expected_len * 4 {
        return Err(Error::format(
            path,
            format!("expected {} f32 values, found {} bytes", expected_len, bytes.len()),
        ));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

pub fn write_u8(path: &Path, values: &[u8]) -> Result<()> {
    fs::write(path, values).map_err(|e| Error::storage(path, e))
}

pub fn read_u8(path: &Path, expected_len: usize) -> Result<Vec<u8>> {
    let bytes = fs::read(path).map_err(|e| Error::storage(path, e))?;
    if bytes.len() != expected_len {
        return Err(Error::format(
            path,
            format!("expected {} bytes, found {}", expected_len, bytes.len()),
        ));
    }
    Ok(bytes)
}

/// Pretty JSON with a trailing newline.
pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)
        .map_err(|e| Error::format(path, e.to_string()))?;
    s.push('\n');
    fs::write(path, s).map_err(|e| Error::storage(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let s = fs::read_to_string(path).map_err(|e| Error::storage(path, e))?;
    serde_json::from_str(&s).map_err(|e| Error::format(path, e.to_string()))
}

pub fn create_dir_all(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::storage(path, e))
}
