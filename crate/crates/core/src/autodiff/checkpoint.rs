//! Binary parameter checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    8 bytes  "CFRGCKPT"
//! version  u32
//! hlen     u64      length of the JSON header
//! header   hlen bytes of UTF-8 JSON: {"meta": ..., "tensors": [{"name", "shape"}]}
//! data     f32 values of every tensor, in header order
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{numel, AutodiffError, Result, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"CFRGCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    meta: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub meta: serde_json::Value,
    pub tensors: Vec<(String, Tensor)>,
}

pub fn save_checkpoint(path: &Path, meta: &serde_json::Value, tensors: &[(String, &Tensor)]) -> Result<()> {
    let header = Header {
        meta: meta.clone(),
        tensors: tensors
            .iter()
            .map(|(n, t)| TensorEntry {
                name: n.clone(),
                shape: t.shape().to_vec(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| AutodiffError::Checkpoint(e.to_string()))?;
    let tmp = path.with_extension("tmp");
    {
        let mut w = BufWriter::new(File::create(&tmp)?);
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        w.write_all(&(json.len() as u64).to_le_bytes())?;
        w.write_all(&json)?;
        for (_, t) in tensors {
            for v in t.data() {
                w.write_all(&(*v as f32).to_le_bytes())?;
            }
        }
        w.flush()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(AutodiffError::Checkpoint(format!(
            "{} is not a checkpoint (bad magic)",
            path.display()
        )));
    }
    let mut u32b = [0u8; 4];
    r.read_exact(&mut u32b)?;
    let version = u32::from_le_bytes(u32b);
    if version != CHECKPOINT_VERSION {
        return Err(AutodiffError::Checkpoint(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let mut u64b = [0u8; 8];
    r.read_exact(&mut u64b)?;
    let hlen = u64::from_le_bytes(u64b) as usize;
    let mut json = vec![0u8; hlen];
    r.read_exact(&mut json)?;
    let header: Header =
        serde_json::from_slice(&json).map_err(|e| AutodiffError::Checkpoint(e.to_string()))?;
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for entry in header.tensors {
        let n = numel(&entry.shape);
        let mut raw = vec![0u8; 4 * n];
        r.read_exact(&mut raw)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        tensors.push((entry.name, Tensor::new(entry.shape, data)?));
    }
    let mut rest = Vec::new();
    r.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(AutodiffError::Checkpoint(format!(
            "{} trailing bytes after tensor data",
            rest.len()
        )));
    }
    Ok(Checkpoint {
        meta: header.meta,
        tensors,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_preserves_f32_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ckpt");
        let a = Tensor::new(vec![2, 2], vec![0.5, -1.25, 3.0, 1e-3]).unwrap();
        let b = Tensor::scalar(7.0);
        let meta = serde_json::json!({"step": 3});
        save_checkpoint(&path, &meta, &[("a".into(), &a), ("b".into(), &b)]).unwrap();
        let ck = load_checkpoint(&path).unwrap();
        assert_eq!(ck.meta, meta);
        assert_eq!(ck.tensors[0].0, "a");
        assert_eq!(ck.tensors[0].1.data()[1], -1.25);
        assert!((ck.tensors[0].1.data()[3] - 1e-3).abs() < 1e-9);
        assert_eq!(ck.tensors[1].1.shape(), &[] as &[usize]);
    }

    #[test]
    fn rejects_foreign_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.ckpt");
        std::fs::write(&path, b"NOTACKPTxxxxxxxxxxxxxxxx").unwrap();
        assert!(matches!(load_checkpoint(&path), Err(AutodiffError::Checkpoint(_))));
    }
}
