//! Named-tensor archive: a JSON manifest (name, dtype, shape, byte offset)
//! next to one little-endian binary blob.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

const FORMAT: &str = "pocvit-tensors";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    fn width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchiveEntry {
    pub name: String,
    pub dtype: Dtype,
    pub shape: Vec<usize>,
    pub offset: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchiveManifest {
    pub format: String,
    pub version: u32,
    /// Blob file name, relative to the manifest's directory.
    pub blob: String,
    pub entries: Vec<ArchiveEntry>,
}

fn blob_path(manifest: &Path) -> PathBuf {
    manifest.with_extension("bin")
}

/// Writes `tensors` in order. Model checkpoints use `F32`; exact training
/// state snapshots use `F64`.
pub fn write_archive(manifest_path: &Path, tensors: &[(String, &Tensor)], dtype: Dtype) -> Result<()> {
    let blob = blob_path(manifest_path);
    let mut bytes = Vec::new();
    let mut entries = Vec::with_capacity(tensors.len());
    for (name, t) in tensors {
        entries.push(ArchiveEntry {
            name: name.clone(),
            dtype,
            shape: t.shape().to_vec(),
            offset: bytes.len() as u64,
        });
        match dtype {
            Dtype::F32 => t
                .data()
                .iter()
                .for_each(|&v| bytes.extend_from_slice(&(v as f32).to_le_bytes())),
            Dtype::F64 => t
                .data()
                .iter()
                .for_each(|&v| bytes.extend_from_slice(&v.to_le_bytes())),
        }
    }
    let manifest = ArchiveManifest {
        format: FORMAT.into(),
        version: 1,
        blob: blob
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default(),
        entries,
    };
    fs::write(&blob, &bytes).map_err(|e| Error::io(&blob, e))?;
    let json = serde_json::to_vec_pretty(&manifest).map_err(|e| Error::json(manifest_path, e))?;
    fs::write(manifest_path, json).map_err(|e| Error::io(manifest_path, e))?;
    Ok(())
}

pub fn read_archive(manifest_path: &Path) -> Result<Vec<(String, Tensor)>> {
    let text = fs::read(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
    let manifest: ArchiveManifest =
        serde_json::from_slice(&text).map_err(|e| Error::json(manifest_path, e))?;
    if manifest.format != FORMAT {
        return Err(Error::Format {
            path: manifest_path.into(),
            msg: format!("unexpected format tag {:?}", manifest.format),
        });
    }
    let blob = manifest_path
        .parent()
        .unwrap_or_else(|| Path::new("."))
        .join(&manifest.blob);
    let bytes = fs::read(&blob).map_err(|e| Error::io(&blob, e))?;
    let mut out = Vec::with_capacity(manifest.entries.len());
    for e in manifest.entries {
        let n: usize = e.shape.iter().product();
        let start = e.offset as usize;
        let end = start + n * e.dtype.width();
        let raw = bytes.get(start..end).ok_or_else(|| Error::Format {
            path: blob.clone(),
            msg: format!("entry {} [{start}, {end}) past end of blob", e.name),
        })?;
        let data = match e.dtype {
            Dtype::F32 => raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                .collect(),
            Dtype::F64 => raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect(),
        };
        out.push((e.name, Tensor::new(&e.shape, data)?));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trips_both_dtypes() {
        let dir = tempfile::tempdir().unwrap();
        let a = Tensor::new(&[2, 3], vec![0.1, -2.0, 3.5, 1e-3, 7.0, 0.0]).unwrap();
        let b = Tensor::scalar(0.25);
        let path = dir.path().join("w.json");
        write_archive(&path, &[("a".into(), &a), ("b".into(), &b)], Dtype::F64).unwrap();
        let back = read_archive(&path).unwrap();
        assert_eq!(back[0], ("a".to_string(), a.clone()));
        assert_eq!(back[1].1, b);

        write_archive(&path, &[("a".into(), &a)], Dtype::F32).unwrap();
        let back = read_archive(&path).unwrap();
        assert!(back[0].1.max_abs_diff(&a) < 1e-6);
        let manifest: ArchiveManifest =
            serde_json::from_slice(&std::fs::read(&path).unwrap()).unwrap();
        assert_eq!(manifest.entries[0].offset, 0);
        assert_eq!(manifest.blob, "w.bin");
        assert_eq!(std::fs::metadata(dir.path().join("w.bin")).unwrap().len(), 24);
    }

    #[test]
    fn truncated_blob_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.json");
        write_archive(&path, &[("a".into(), &Tensor::zeros(&[4]))], Dtype::F32).unwrap();
        std::fs::write(dir.path().join("w.bin"), [0u8; 5]).unwrap();
        assert!(matches!(read_archive(&path), Err(Error::Format { .. })));
    }
}
