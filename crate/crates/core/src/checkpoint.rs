//! Checkpoint directories: `manifest.json` mapping tensor names to
//! `{shape, dtype, offset, file}` plus raw little-endian blobs.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::tensor_le_bytes;

pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub shape: Vec<usize>,
    pub dtype: String,
    pub offset: u64,
    pub file: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub tensors: BTreeMap<String, TensorEntry>,
}

fn dtype_name(d: DType) -> Result<&'static str> {
    match d {
        DType::F32 => Ok("f32"),
        DType::F64 => Ok("f64"),
        other => Err(Error::config(format!("cannot checkpoint dtype {other:?}"))),
    }
}

/// Writes each group of tensors to its own blob file, in name order.
pub fn save_tensors(dir: &Path, groups: &[(&str, BTreeMap<String, Tensor>)]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = Manifest::default();
    for (file, tensors) in groups {
        let mut blob = Vec::new();
        for (name, t) in tensors {
            let bytes = tensor_le_bytes(t)?;
            manifest.tensors.insert(
                name.clone(),
                TensorEntry {
                    shape: t.dims().to_vec(),
                    dtype: dtype_name(t.dtype())?.to_string(),
                    offset: blob.len() as u64,
                    file: file.to_string(),
                },
            );
            blob.extend_from_slice(&bytes);
        }
        let path = dir.join(file);
        fs::write(&path, &blob).map_err(|e| Error::io(path, e))?;
    }
    let path = dir.join(MANIFEST);
    let json = serde_json::to_string_pretty(&manifest)?;
    fs::write(&path, json + "\n").map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Loads every tensor named in the manifest, keeping its stored dtype.
pub fn load_tensors(dir: &Path) -> Result<BTreeMap<String, Tensor>> {
    let manifest = read_manifest(dir)?;
    let mut blobs: BTreeMap<String, Vec<u8>> = BTreeMap::new();
    let mut out = BTreeMap::new();
    for (name, e) in &manifest.tensors {
        if !blobs.contains_key(&e.file) {
            let path = dir.join(&e.file);
            let bytes = fs::read(&path).map_err(|err| Error::io(&path, err))?;
            blobs.insert(e.file.clone(), bytes);
        }
        let blob = &blobs[&e.file];
        let n: usize = e.shape.iter().product();
        let width = match e.dtype.as_str() {
            "f32" => 4,
            "f64" => 8,
            other => return Err(Error::data(format!("tensor `{name}` has unsupported dtype `{other}`"))),
        };
        let start = e.offset as usize;
        let end = start + n * width;
        if end > blob.len() {
            return Err(Error::data(format!(
                "tensor `{name}` spans bytes {start}..{end} but `{}` holds {}",
                e.file,
                blob.len()
            )));
        }
        let raw = &blob[start..end];
        let t = if width == 4 {
            let v: Vec<f32> = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            Tensor::from_vec(v, e.shape.as_slice(), &Device::Cpu)?
        } else {
            let v: Vec<f64> = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            Tensor::from_vec(v, e.shape.as_slice(), &Device::Cpu)?
        };
        out.insert(name.clone(), t);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_preserves_values_and_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let mut g = BTreeMap::new();
        g.insert("b".to_string(), Tensor::new(&[[1.5f32, -2.0], [0.0, 3.25]], &Device::Cpu).unwrap());
        g.insert("a".to_string(), Tensor::new(&[7.0f64], &Device::Cpu).unwrap());
        save_tensors(dir.path(), &[("params.bin", g)]).unwrap();
        let loaded = load_tensors(dir.path()).unwrap();
        assert_eq!(loaded["b"].dims(), &[2, 2]);
        assert_eq!(loaded["a"].dtype(), DType::F64);
        let m = read_manifest(dir.path()).unwrap();
        assert_eq!(m.tensors["a"].offset, 0);
        assert_eq!(m.tensors["b"].offset, 8);

        let dir2 = tempfile::tempdir().unwrap();
        save_tensors(dir2.path(), &[("params.bin", loaded)]).unwrap();
        for f in [MANIFEST, "params.bin"] {
            assert_eq!(
                fs::read(dir.path().join(f)).unwrap(),
                fs::read(dir2.path().join(f)).unwrap()
            );
        }
    }

    #[test]
    fn truncated_blob_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let mut g = BTreeMap::new();
        g.insert("w".to_string(), Tensor::new(&[1.0f32, 2.0], &Device::Cpu).unwrap());
        save_tensors(dir.path(), &[("p.bin", g)]).unwrap();
        fs::write(dir.path().join("p.bin"), [0u8; 4]).unwrap();
        assert!(matches!(load_tensors(dir.path()), Err(Error::Data(_))));
    }
}
