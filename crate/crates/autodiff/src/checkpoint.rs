//! On-disk checkpoints: `manifest.json` plus a raw little-endian f32 blob.
//!
//! ```text
//! <dir>/manifest.json   {"format": "ulbsc-checkpoint", "version": 1, "dtype": "f32",
//!                        "blob": "weights.bin", "params": [{name, shape, offset, len}],
//!                        "metadata": {...}}
//! <dir>/weights.bin     concatenated parameter values, f32 LE, offsets in bytes
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::param::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const FORMAT: &str = "ulbsc-checkpoint";
pub const VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const WEIGHTS_FILE: &str = "weights.bin";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the blob.
    pub offset: u64,
    /// Number of f32 values.
    pub len: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub dtype: String,
    pub blob: String,
    pub params: Vec<ParamEntry>,
    #[serde(default)]
    pub metadata: serde_json::Value,
}

pub fn f32_to_le_bytes(values: impl IntoIterator<Item = f32>) -> Vec<u8> {
    values.into_iter().flat_map(f32::to_le_bytes).collect()
}

pub fn f32_from_le_bytes(bytes: &[u8]) -> Result<Vec<f32>> {
    if bytes.len() % 4 != 0 {
        return Err(Error::Checkpoint(format!(
            "blob length {} is not a multiple of 4",
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

/// Encodes a store into manifest JSON and blob bytes.
pub fn encode<T: Scalar>(store: &ParamStore<T>, metadata: serde_json::Value) -> Result<(String, Vec<u8>)> {
    let mut blob = Vec::with_capacity(store.num_values() * 4);
    let mut params = Vec::with_capacity(store.len());
    for p in store.iter() {
        params.push(ParamEntry {
            name: p.name.clone(),
            shape: p.tensor.shape().to_vec(),
            offset: blob.len() as u64,
            len: p.tensor.numel() as u64,
        });
        blob.extend(f32_to_le_bytes(p.tensor.data().iter().map(|x| x.as_f64() as f32)));
    }
    let manifest = Manifest {
        format: FORMAT.into(),
        version: VERSION,
        dtype: "f32".into(),
        blob: WEIGHTS_FILE.into(),
        params,
        metadata,
    };
    Ok((serde_json::to_string_pretty(&manifest)?, blob))
}

/// Parses and validates a manifest against its blob. Never panics on malformed input.
pub fn decode(manifest: &[u8], blob: &[u8]) -> Result<(Manifest, Vec<(String, Tensor<f32>)>)> {
    let manifest: Manifest = serde_json::from_slice(manifest)?;
    if manifest.format != FORMAT || manifest.version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format {} v{}",
            manifest.format, manifest.version
        )));
    }
    if manifest.dtype != "f32" {
        return Err(Error::Checkpoint(format!("unsupported dtype {}", manifest.dtype)));
    }
    let mut out = Vec::with_capacity(manifest.params.len());
    let mut expected_offset = 0u64;
    for p in &manifest.params {
        if out.iter().any(|(n, _): &(String, _)| *n == p.name) {
            return Err(Error::Checkpoint(format!("duplicate parameter `{}`", p.name)));
        }
        let numel = p
            .shape
            .iter()
            .try_fold(1u64, |acc, &d| acc.checked_mul(d as u64))
            .ok_or_else(|| Error::Checkpoint(format!("shape of `{}` overflows", p.name)))?;
        if numel != p.len || p.offset != expected_offset {
            return Err(Error::Checkpoint(format!(
                "entry `{}` inconsistent: shape {:?}, len {}, offset {}",
                p.name, p.shape, p.len, p.offset
            )));
        }
        let end = p
            .len
            .checked_mul(4)
            .and_then(|b| b.checked_add(p.offset))
            .filter(|&e| e <= blob.len() as u64)
            .ok_or_else(|| Error::Checkpoint(format!("entry `{}` runs past the blob", p.name)))?;
        let values = f32_from_le_bytes(&blob[p.offset as usize..end as usize])?;
        let t = Tensor::new(p.shape.clone(), values)
            .map_err(|e| Error::Checkpoint(format!("entry `{}`: {e}", p.name)))?;
        out.push((p.name.clone(), t));
        expected_offset = end;
    }
    if expected_offset != blob.len() as u64 {
        return Err(Error::Checkpoint(format!(
            "blob holds {} bytes, manifest describes {expected_offset}",
            blob.len()
        )));
    }
    Ok((manifest, out))
}

pub fn save<T: Scalar>(dir: &Path, store: &ParamStore<T>, metadata: serde_json::Value) -> Result<()> {
    fs::create_dir_all(dir)?;
    let (manifest, blob) = encode(store, metadata)?;
    fs::write(dir.join(WEIGHTS_FILE), blob)?;
    fs::write(dir.join(MANIFEST_FILE), manifest)?;
    Ok(())
}

/// Reads a checkpoint directory; values are returned at f32 with their metadata.
pub fn load(dir: &Path) -> Result<(Manifest, Vec<(String, Tensor<f32>)>)> {
    let manifest = fs::read(dir.join(MANIFEST_FILE))?;
    let head: Manifest = serde_json::from_slice(&manifest)?;
    if head.blob.contains(['/', '\\']) || head.blob.contains("..") {
        return Err(Error::Checkpoint(format!("blob name `{}` escapes the directory", head.blob)));
    }
    let blob = fs::read(dir.join(&head.blob))?;
    decode(&manifest, &blob)
}

/// Loads a checkpoint directly into an existing store, checking names and shapes.
pub fn load_into<T: Scalar>(dir: &Path, store: &mut ParamStore<T>) -> Result<serde_json::Value> {
    let (manifest, values) = load(dir)?;
    let values: Vec<_> = values.into_iter().map(|(n, t)| (n, t.cast::<T>())).collect();
    store.load_values(&values)?;
    Ok(manifest.metadata)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> ParamStore<f32> {
        let mut s = ParamStore::new();
        s.add("a.weight", Tensor::new([2, 3], vec![1.0, -2.5, 3.25, f32::MIN_POSITIVE, 1e-30, 7.0]).unwrap());
        s.add("a.bias", Tensor::new([3], vec![0.1, 0.2, 0.3]).unwrap());
        s
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let s = store();
        save(dir.path(), &s, serde_json::json!({"arch": "toy"})).unwrap();
        let mut fresh = ParamStore::<f32>::new();
        fresh.add("a.weight", Tensor::zeros([2, 3]));
        fresh.add("a.bias", Tensor::zeros([3]));
        let meta = load_into(dir.path(), &mut fresh).unwrap();
        assert_eq!(meta["arch"], "toy");
        for (a, b) in s.iter().zip(fresh.iter()) {
            let bits = |t: &Tensor<f32>| t.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&a.tensor), bits(&b.tensor));
        }
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        save(dir.path(), &store(), serde_json::Value::Null).unwrap();
        let mut other = ParamStore::<f32>::new();
        other.add("a.weight", Tensor::zeros([3, 2]));
        other.add("a.bias", Tensor::zeros([3]));
        assert!(load_into(dir.path(), &mut other).is_err());
    }

    #[test]
    fn truncated_blob_is_rejected() {
        let (m, blob) = encode(&store(), serde_json::Value::Null).unwrap();
        assert!(decode(m.as_bytes(), &blob[..blob.len() - 4]).is_err());
        assert!(decode(m.as_bytes(), &blob[..blob.len() - 1]).is_err());
        let mut long = blob.clone();
        long.extend([0u8; 4]);
        assert!(decode(m.as_bytes(), &long).is_err());
        assert!(decode(m.as_bytes(), &blob).is_ok());
    }

    #[test]
    fn garbage_manifest_is_an_error() {
        assert!(decode(b"{not json", &[]).is_err());
        assert!(decode(br#"{"format":"x","version":1,"dtype":"f32","blob":"w","params":[]}"#, &[]).is_err());
    }
}
