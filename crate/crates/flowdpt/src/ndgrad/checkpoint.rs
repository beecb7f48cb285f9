//! Checkpoint serialization: a JSON manifest naming every tensor with shape
//! and dtype, followed by a binary blob of little-endian f64 values in
//! manifest order. Single self-describing file.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::array::Array;

const MAGIC: &[u8; 4] = b"FDPT";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {found}, expected {expected}")]
    Version { found: u32, expected: u32 },
    #[error("truncated checkpoint file")]
    Truncated,
    #[error("manifest error: {0}")]
    Manifest(#[from] serde_json::Error),
    #[error("tensor {name}: blob holds {got} values, manifest wants {want}")]
    BlobMismatch { name: String, want: usize, got: usize },
}

#[derive(Debug, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    /// Model/trainer metadata: group registry, architecture, step counter.
    pub meta: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

pub fn save_checkpoint(
    path: &Path,
    meta: serde_json::Value,
    tensors: &[(String, &Array)],
) -> Result<(), CheckpointError> {
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        meta,
        tensors: tensors
            .iter()
            .map(|(name, a)| TensorEntry {
                name: name.clone(),
                shape: a.shape().to_vec(),
                dtype: "f64".to_string(),
            })
            .collect(),
    };
    let manifest_bytes = serde_json::to_vec(&manifest)?;
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&(manifest_bytes.len() as u64).to_le_bytes())?;
    w.write_all(&manifest_bytes)?;
    for (_, a) in tensors {
        for x in a.data() {
            w.write_all(&x.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(Manifest, Vec<Array>), CheckpointError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|_| CheckpointError::Truncated)?;
    if &magic != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let mut v = [0u8; 4];
    r.read_exact(&mut v).map_err(|_| CheckpointError::Truncated)?;
    let version = u32::from_le_bytes(v);
    if version != FORMAT_VERSION {
        return Err(CheckpointError::Version { found: version, expected: FORMAT_VERSION });
    }
    let mut len = [0u8; 8];
    r.read_exact(&mut len).map_err(|_| CheckpointError::Truncated)?;
    let mut manifest_bytes = vec![0u8; u64::from_le_bytes(len) as usize];
    r.read_exact(&mut manifest_bytes).map_err(|_| CheckpointError::Truncated)?;
    let manifest: Manifest = serde_json::from_slice(&manifest_bytes)?;

    let mut tensors = Vec::with_capacity(manifest.tensors.len());
    for entry in &manifest.tensors {
        let n: usize = entry.shape.iter().product();
        let mut buf = vec![0u8; n * 8];
        r.read_exact(&mut buf).map_err(|_| CheckpointError::Truncated)?;
        let data: Vec<f64> = buf
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        let arr = Array::from_vec(&entry.shape, data).map_err(|_| CheckpointError::BlobMismatch {
            name: entry.name.clone(),
            want: n,
            got: 0,
        })?;
        tensors.push(arr);
    }
    Ok((manifest, tensors))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trips_bitwise() {
        let dir = std::env::temp_dir().join("flowdpt_ckpt_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("rt.ckpt");
        let a = Array::from_vec(&[2, 2], vec![1.0, -2.5, 3.25, f64::MIN_POSITIVE]).unwrap();
        let b = Array::from_vec(&[3], vec![0.1, 0.2, 0.3]).unwrap();
        let meta = serde_json::json!({"step": 7});
        save_checkpoint(&path, meta, &[("a".into(), &a), ("b".into(), &b)]).unwrap();
        let (manifest, tensors) = load_checkpoint(&path).unwrap();
        assert_eq!(manifest.meta["step"], 7);
        assert_eq!(manifest.tensors[0].name, "a");
        assert_eq!(tensors[0], a);
        assert_eq!(tensors[1], b);
        std::fs::remove_file(&path).unwrap();
    }

    #[test]
    fn bad_magic_rejected() {
        let dir = std::env::temp_dir().join("flowdpt_ckpt_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("bad.ckpt");
        std::fs::write(&path, b"NOPExxxxxxxxxxxxxxx").unwrap();
        assert!(matches!(load_checkpoint(&path), Err(CheckpointError::BadMagic)));
        std::fs::remove_file(&path).unwrap();
    }

    #[test]
    fn truncated_blob_detected() {
        let dir = std::env::temp_dir().join("flowdpt_ckpt_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("trunc.ckpt");
        let a = Array::from_vec(&[4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        save_checkpoint(&path, serde_json::json!({}), &[("a".into(), &a)]).unwrap();
        let full = std::fs::read(&path).unwrap();
        std::fs::write(&path, &full[..full.len() - 9]).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(CheckpointError::Truncated)));
        std::fs::remove_file(&path).unwrap();
    }
}
