//! `params.bin`: a sequence of records, each
//! `u32 name_len | name (UTF-8) | u32 rank | rank × u32 dims | f32 payload`,
//! all little-endian, in parameter registration order.

use std::path::Path;

use crate::error::{Error, Result};

use super::params::ParamSet;
use super::tensor::Tensor;

pub fn encode_params(ps: &ParamSet) -> Vec<u8> {
    let mut buf = Vec::new();
    for (name, t) in ps.iter() {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in t.data() {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    buf
}

struct Cursor<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let s = self
            .bytes
            .get(self.at..self.at + n)
            .ok_or_else(|| format!("truncated at byte {}", self.at))?;
        self.at += n;
        Ok(s)
    }

    fn u32(&mut self) -> std::result::Result<usize, String> {
        self.take(4).map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }
}

pub fn decode_params(bytes: &[u8]) -> std::result::Result<ParamSet, String> {
    let mut ps = ParamSet::new();
    let mut cur = Cursor { bytes, at: 0 };
    while cur.at < bytes.len() {
        let len = cur.u32()?;
        let name = String::from_utf8(cur.take(len)?.to_vec()).map_err(|e| e.to_string())?;
        let rank = cur.u32()?;
        let dims = (0..rank).map(|_| cur.u32()).collect::<std::result::Result<Vec<_>, _>>()?;
        let n: usize = dims.iter().product();
        let data = cur
            .take(n * 4)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        if ps.names().contains(&name) {
            return Err(format!("duplicate parameter {name}"));
        }
        ps.add(name, Tensor::from_vec(&dims, data).map_err(|e| e.to_string())?);
    }
    Ok(ps)
}

pub fn save_params(path: &Path, ps: &ParamSet) -> Result<()> {
    std::fs::write(path, encode_params(ps)).map_err(|e| Error::storage(path, e))
}

pub fn load_params(path: &Path) -> Result<ParamSet> {
    let bytes = std::fs::read(path).map_err(|e| Error::storage(path, e))?;
    decode_params(&bytes).map_err(|m| Error::format(path, m))
}

/// Copy values from `loaded` into a freshly built `template` with the same
/// names and shapes.
pub fn restore_into(template: &mut ParamSet, loaded: &ParamSet) -> Result<()> {
    template.check_compatible(loaded)?;
    for (t, l) in template.tensors_mut().iter_mut().zip(loaded.tensors()) {
        t.data_mut().copy_from_slice(l.data());
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_is_little_endian_records() {
        let mut ps = ParamSet::new();
        ps.add("w", Tensor::from_vec(&[2], vec![1.0, -2.5]).unwrap());
        let b = encode_params(&ps);
        assert_eq!(&b[0..4], &1u32.to_le_bytes());
        assert_eq!(b[4], b'w');
        assert_eq!(&b[5..9], &1u32.to_le_bytes());
        assert_eq!(&b[9..13], &2u32.to_le_bytes());
        assert_eq!(&b[13..17], &1.0f32.to_le_bytes());
        assert_eq!(&b[17..21], &(-2.5f32).to_le_bytes());
        assert_eq!(decode_params(&b).unwrap(), ps);
        assert!(decode_params(&b[..15]).is_err());
    }
}
