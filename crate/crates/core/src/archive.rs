//! Self-describing tensor archive.
//!
//! Layout (all integers little-endian):
//!
//! | bytes | content                                   |
//! |-------|-------------------------------------------|
//! | 8     | magic `UWFCKPT\0`                         |
//! | 4     | format version (u32)                      |
//! | 8     | header length `h` (u64)                   |
//! | h     | UTF-8 JSON header                         |
//! | ...   | tensor payload, concatenated              |
//!
//! The header holds `dtype`, free-form `meta`, and a `tensors` table of
//! `{name, shape, offset}` where `offset` is in elements from the payload start.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::scalar::{decode_as, dtype_width, Scalar};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"UWFCKPT\0";
pub const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    dtype: String,
    meta: Value,
    tensors: Vec<Entry>,
}

pub struct Archive<T> {
    pub meta: Value,
    pub tensors: BTreeMap<String, Tensor<T>>,
    /// Names in file order.
    pub order: Vec<String>,
}

pub fn encode<T: Scalar>(meta: &Value, tensors: &[(String, &Tensor<T>)]) -> Result<Vec<u8>> {
    let mut entries = Vec::with_capacity(tensors.len());
    let mut offset = 0;
    for (name, t) in tensors {
        entries.push(Entry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            offset,
        });
        offset += t.len();
    }
    let header = serde_json::to_vec(&Header {
        dtype: T::DTYPE.into(),
        meta: meta.clone(),
        tensors: entries,
    })?;
    let mut out = Vec::with_capacity(20 + header.len() + offset * T::BYTES);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for (_, t) in tensors {
        for &v in t.data() {
            v.write_le(&mut out);
        }
    }
    Ok(out)
}

pub fn write<T: Scalar>(path: &Path, meta: &Value, tensors: &[(String, &Tensor<T>)]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, encode(meta, tensors)?)?;
    Ok(())
}

fn format_err(path: &Path, what: &str) -> Error {
    Error::Format(format!("{}: {what}", path.display()))
}

/// Header only, without decoding the payload.
pub fn read_meta(path: &Path) -> Result<Value> {
    let bytes = read_bytes(path)?;
    Ok(parse_header(path, &bytes)?.0.meta)
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    Ok(fs::read(path)?)
}

fn parse_header(path: &Path, bytes: &[u8]) -> Result<(Header, usize)> {
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(format_err(path, "not a checkpoint archive"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(format_err(path, &format!("unsupported archive version {version}")));
    }
    let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let end = 20usize.checked_add(hlen).filter(|&e| e <= bytes.len());
    let end = end.ok_or_else(|| format_err(path, "truncated header"))?;
    let header: Header = serde_json::from_slice(&bytes[20..end])?;
    Ok((header, end))
}

pub fn read<T: Scalar>(path: &Path) -> Result<Archive<T>> {
    let bytes = read_bytes(path)?;
    let (header, start) = parse_header(path, &bytes)?;
    let width = dtype_width(&header.dtype).ok_or_else(|| format_err(path, &format!("unknown dtype {}", header.dtype)))?;
    let payload = &bytes[start..];
    let mut tensors = BTreeMap::new();
    let mut order = Vec::new();
    for e in header.tensors {
        let n: usize = e.shape.iter().product();
        let lo = e.offset * width;
        let hi = lo + n * width;
        if hi > payload.len() {
            return Err(format_err(path, &format!("tensor `{}` runs past the payload", e.name)));
        }
        let data = payload[lo..hi]
            .chunks_exact(width)
            .map(|c| decode_as::<T>(&header.dtype, c).expect("known dtype"))
            .collect();
        order.push(e.name.clone());
        tensors.insert(e.name, Tensor::from_vec(&e.shape, data));
    }
    Ok(Archive {
        meta: header.meta,
        tensors,
        order,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn roundtrip_and_cross_dtype() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.uwfckpt");
        let a = Tensor::from_vec(&[2, 2], vec![1.0f64, -2.5, 3.25, 0.0]);
        let b = Tensor::from_vec(&[3], vec![7.0f64, 8.0, 9.0]);
        write(&p, &json!({"k": 1}), &[("a".into(), &a), ("b".into(), &b)]).unwrap();
        let back = read::<f64>(&p).unwrap();
        assert_eq!(back.meta["k"], 1);
        assert_eq!(back.tensors["a"], a);
        assert_eq!(back.order, ["a", "b"]);
        let as32 = read::<f32>(&p).unwrap();
        assert_eq!(as32.tensors["b"].data(), &[7.0f32, 8.0, 9.0]);
        assert_eq!(read_meta(&p).unwrap()["k"], 1);
    }

    #[test]
    fn rejects_garbage() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x");
        fs::write(&p, b"hello world, this is not it").unwrap();
        assert!(matches!(read::<f32>(&p), Err(Error::Format(_))));
        assert!(matches!(read::<f32>(&dir.path().join("none")), Err(Error::MissingFile(_))));
    }
}
