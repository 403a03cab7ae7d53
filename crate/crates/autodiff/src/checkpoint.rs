//! Checkpoint directories: `manifest.json` plus `weights.bin`.
//!
//! The manifest lists every tensor as `{name, shape, dtype, offset, length}`
//! (offset and length in bytes); the binary file is the concatenation of all
//! tensors as little-endian IEEE-754 values in manifest order. A free-form
//! `metadata` object carries model configuration.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::scalar::{DType, Scalar};
use crate::tensor::Tensor;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const WEIGHTS_FILE: &str = "weights.bin";
pub const FORMAT: &str = "msync-checkpoint/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: DType,
    pub offset: u64,
    pub length: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub metadata: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

/// Serializes `store` into `(manifest, weights)`.
pub fn encode<T: Scalar>(store: &ParamStore<T>, metadata: serde_json::Value) -> (Manifest, Vec<u8>) {
    let mut bytes = Vec::with_capacity(store.numel() * T::DTYPE.size());
    let mut tensors = Vec::with_capacity(store.len());
    for (_, name, t) in store.iter() {
        let offset = bytes.len() as u64;
        for &v in t.data() {
            v.write_le(&mut bytes);
        }
        tensors.push(TensorEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            dtype: T::DTYPE,
            offset,
            length: bytes.len() as u64 - offset,
        });
    }
    let manifest = Manifest {
        format: FORMAT.to_string(),
        metadata,
        tensors,
    };
    (manifest, bytes)
}

/// Rebuilds a store from a manifest and weight bytes, converting to `T`.
pub fn decode<T: Scalar>(manifest: &Manifest, bytes: &[u8]) -> Result<ParamStore<T>> {
    if manifest.format != FORMAT {
        return Err(Error::Checkpoint(format!("unknown format `{}`", manifest.format)));
    }
    let mut store = ParamStore::new();
    for e in &manifest.tensors {
        let n: usize = e.shape.iter().product();
        let size = e.dtype.size();
        if e.length as usize != n * size {
            return Err(Error::Checkpoint(format!(
                "`{}`: length {} does not match shape {:?}",
                e.name, e.length, e.shape
            )));
        }
        let start = e.offset as usize;
        let end = start + e.length as usize;
        let raw = bytes.get(start..end).ok_or_else(|| {
            Error::Checkpoint(format!("`{}`: bytes {start}..{end} past end of file", e.name))
        })?;
        let data: Vec<T> = match e.dtype {
            DType::F32 => raw.chunks(4).map(|c| T::lit(f32::read_le(c) as f64)).collect(),
            DType::F64 => raw.chunks(8).map(|c| T::lit(f64::read_le(c))).collect(),
        };
        store.add(e.name.clone(), Tensor::new(e.shape.clone(), data)?)?;
    }
    Ok(store)
}

pub fn save<T: Scalar>(dir: &Path, store: &ParamStore<T>, metadata: serde_json::Value) -> Result<()> {
    fs::create_dir_all(dir)?;
    let (manifest, bytes) = encode(store, metadata);
    let mut json = serde_json::to_string_pretty(&manifest)?;
    json.push('\n');
    fs::write(dir.join(MANIFEST_FILE), json)?;
    fs::write(dir.join(WEIGHTS_FILE), bytes)?;
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(dir.join(MANIFEST_FILE))?;
    Ok(serde_json::from_str(&text)?)
}

pub fn load<T: Scalar>(dir: &Path) -> Result<(ParamStore<T>, serde_json::Value)> {
    let manifest = read_manifest(dir)?;
    let bytes = fs::read(dir.join(WEIGHTS_FILE))?;
    let store = decode(&manifest, &bytes)?;
    Ok((store, manifest.metadata))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn offsets_are_contiguous() {
        let mut s = ParamStore::<f32>::new();
        s.add("a", Tensor::zeros(vec![2, 3])).unwrap();
        s.add("b", Tensor::zeros(vec![4])).unwrap();
        let (m, bytes) = encode(&s, serde_json::json!({}));
        assert_eq!(m.tensors[0].offset, 0);
        assert_eq!(m.tensors[0].length, 24);
        assert_eq!(m.tensors[1].offset, 24);
        assert_eq!(bytes.len(), 40);
    }

    #[test]
    fn truncated_weights_rejected() {
        let mut s = ParamStore::<f64>::new();
        s.add("a", Tensor::vector(vec![1.0, 2.0])).unwrap();
        let (m, bytes) = encode(&s, serde_json::Value::Null);
        assert!(decode::<f64>(&m, &bytes[..8]).is_err());
    }
}
