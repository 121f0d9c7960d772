//! Parameter checkpoints: an 8-byte little-endian header length, a JSON
//! header listing each tensor's name, shape and byte offset, then the raw
//! little-endian `f64` payload.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{ParamStore, Tensor};

#[derive(Debug, Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    /// Byte offset into the payload.
    offset: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    dtype: String,
    tensors: Vec<Entry>,
    #[serde(default)]
    metadata: serde_json::Value,
}

/// Parameters plus free-form metadata describing how to rebuild the model.
#[derive(Clone, Debug)]
pub struct Checkpoint<T> {
    pub params: ParamStore<T>,
    pub metadata: serde_json::Value,
}

pub fn save_checkpoint<T: Scalar>(
    path: impl AsRef<Path>,
    params: &ParamStore<T>,
    metadata: serde_json::Value,
) -> Result<()> {
    let mut tensors = Vec::with_capacity(params.len());
    let mut payload = Vec::with_capacity(params.num_scalars() * 8);
    for (_, name, t) in params.iter() {
        tensors.push(Entry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            offset: payload.len(),
        });
        for &x in t.data() {
            payload.extend_from_slice(&x.as_f64().to_le_bytes());
        }
    }
    let header = serde_json::to_vec(&Header {
        dtype: "f64".into(),
        tensors,
        metadata,
    })?;
    let mut bytes = Vec::with_capacity(8 + header.len() + payload.len());
    bytes.extend_from_slice(&(header.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&header);
    bytes.extend_from_slice(&payload);
    fs::write(path, bytes)?;
    Ok(())
}

pub fn load_checkpoint<T: Scalar>(path: impl AsRef<Path>) -> Result<Checkpoint<T>> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let bytes = fs::read(path)?;
    let corrupt = |what: &str| Error::InvalidArgument(format!("{}: {what}", path.display()));
    let len_bytes: [u8; 8] = bytes
        .get(..8)
        .ok_or_else(|| corrupt("truncated header length"))?
        .try_into()
        .unwrap();
    let header_len = u64::from_le_bytes(len_bytes) as usize;
    let header_end = 8usize
        .checked_add(header_len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| corrupt("truncated header"))?;
    let header: Header = serde_json::from_slice(&bytes[8..header_end])?;
    if header.dtype != "f64" {
        return Err(corrupt("unsupported dtype"));
    }
    let payload = &bytes[header_end..];
    let mut params = ParamStore::new();
    for e in header.tensors {
        let n: usize = e.shape.iter().product();
        let raw = payload
            .get(e.offset..e.offset + 8 * n)
            .ok_or_else(|| corrupt("payload shorter than header claims"))?;
        let data = raw
            .chunks_exact(8)
            .map(|c| T::lit(f64::from_le_bytes(c.try_into().unwrap())))
            .collect();
        params.add(e.name, Tensor::new(e.shape, data)?);
    }
    Ok(Checkpoint {
        params,
        metadata: header.metadata,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.bin");
        let mut store = ParamStore::new();
        store.add("a", Tensor::new(vec![2, 2], vec![0.1, -2.5e-300, 3.0, f64::MAX]).unwrap());
        store.add("b", Tensor::from_vec(vec![std::f64::consts::PI]));
        save_checkpoint(&path, &store, serde_json::json!({"kind": "test"})).unwrap();
        let back: Checkpoint<f64> = load_checkpoint(&path).unwrap();
        assert_eq!(back.params, store);
        assert_eq!(back.metadata["kind"], "test");
    }

    #[test]
    fn truncated_file_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.bin");
        let mut store = ParamStore::new();
        store.add("a", Tensor::from_vec(vec![1.0, 2.0]));
        save_checkpoint(&path, &store, serde_json::Value::Null).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 4]).unwrap();
        assert!(load_checkpoint::<f64>(&path).is_err());
    }
}
