//! Flat checkpoint format: `header.json` lists every tensor as
//! `{name, shape, dtype: "f32", offset, length}` and `weights.bin` holds the
//! little-endian `f32` payloads back to back. `offset` is a byte offset into
//! `weights.bin`; `length` is the element count.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{NumError, Result};
use crate::tensor::{numel, Tensor};

pub const HEADER_FILE: &str = "header.json";
pub const WEIGHTS_FILE: &str = "weights.bin";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub offset: usize,
    pub length: usize,
}

pub fn save_checkpoint<'a>(dir: &Path, tensors: impl IntoIterator<Item = (&'a str, &'a Tensor<f32>)>) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut header = Vec::new();
    let mut blob = Vec::new();
    for (name, t) in tensors {
        header.push(TensorEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            dtype: "f32".into(),
            offset: blob.len(),
            length: t.numel(),
        });
        for v in t.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(dir.join(HEADER_FILE), serde_json::to_vec_pretty(&header)?)?;
    fs::write(dir.join(WEIGHTS_FILE), blob)?;
    Ok(())
}

pub fn load_checkpoint(dir: &Path) -> Result<Vec<(String, Tensor<f32>)>> {
    let header: Vec<TensorEntry> = serde_json::from_slice(&fs::read(dir.join(HEADER_FILE))?)?;
    let blob = fs::read(dir.join(WEIGHTS_FILE))?;
    let expected: usize = header.iter().map(|e| e.length * 4).sum();
    if expected != blob.len() {
        return Err(NumError::Checkpoint(format!(
            "weights.bin has {} bytes, header describes {expected}",
            blob.len()
        )));
    }
    let mut out = Vec::with_capacity(header.len());
    for e in header {
        if e.dtype != "f32" {
            return Err(NumError::Checkpoint(format!(
                "{}: unsupported dtype {}",
                e.name, e.dtype
            )));
        }
        if numel(&e.shape) != e.length {
            return Err(NumError::Checkpoint(format!(
                "{}: shape {:?} does not hold {} elements",
                e.name, e.shape, e.length
            )));
        }
        let end = e.offset + e.length * 4;
        if end > blob.len() {
            return Err(NumError::Checkpoint(format!("{}: payload out of range", e.name)));
        }
        let data = blob[e.offset..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        out.push((e.name, Tensor::new(&e.shape, data)?));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_length_validation() {
        let dir = tempfile::tempdir().unwrap();
        let a = Tensor::<f32>::from_f64(&[2, 2], &[1.0, -2.5, 3.25, 0.0]).unwrap();
        let b = Tensor::<f32>::scalar(7.0);
        save_checkpoint(dir.path(), [("encoder/a", &a), ("encoder/b", &b)]).unwrap();
        let loaded = load_checkpoint(dir.path()).unwrap();
        assert_eq!(loaded[0].0, "encoder/a");
        assert_eq!(loaded[0].1, a);
        assert_eq!(loaded[1].1, b);

        let header: Vec<TensorEntry> =
            serde_json::from_slice(&fs::read(dir.path().join(HEADER_FILE)).unwrap()).unwrap();
        assert_eq!(header[1].offset, 16);
        assert_eq!(header[1].length, 1);

        let mut blob = fs::read(dir.path().join(WEIGHTS_FILE)).unwrap();
        blob.pop();
        fs::write(dir.path().join(WEIGHTS_FILE), blob).unwrap();
        assert!(matches!(load_checkpoint(dir.path()), Err(NumError::Checkpoint(_))));
    }
}
