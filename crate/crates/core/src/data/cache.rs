//! Raw little-endian `f32` arrays with a JSON sidecar (`<name>.f32` +
//! `<name>.json`) recording shape and dtype.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArrayHeader {
    pub shape: Vec<usize>,
    pub dtype: String,
    pub byte_order: String,
}

fn paths(stem: &Path) -> (PathBuf, PathBuf) {
    (stem.with_extension("f32"), stem.with_extension("json"))
}

pub fn write_f32_array(stem: &Path, shape: &[usize], data: &[f32]) -> Result<()> {
    let expected: usize = shape.iter().product();
    if expected != data.len() {
        return Err(Error::shape(format!(
            "shape {shape:?} holds {expected} values, got {}",
            data.len()
        )));
    }
    let (bin, json) = paths(stem);
    if let Some(dir) = bin.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut bytes = Vec::with_capacity(data.len() * 4);
    for v in data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(&bin, bytes).map_err(|e| Error::io(&bin, e))?;
    let header = ArrayHeader {
        shape: shape.to_vec(),
        dtype: "float32".into(),
        byte_order: "little".into(),
    };
    fs::write(&json, serde_json::to_vec_pretty(&header)?).map_err(|e| Error::io(&json, e))?;
    Ok(())
}

pub fn read_f32_array(stem: &Path) -> Result<(Vec<usize>, Vec<f32>)> {
    let (bin, json) = paths(stem);
    let header: ArrayHeader =
        serde_json::from_slice(&fs::read(&json).map_err(|e| Error::io(&json, e))?)?;
    if header.dtype != "float32" || header.byte_order != "little" {
        return Err(Error::validation(format!(
            "{}: unsupported dtype {} / byte order {}",
            json.display(),
            header.dtype,
            header.byte_order
        )));
    }
    let bytes = fs::read(&bin).map_err(|e| Error::io(&bin, e))?;
    let n: usize = header.shape.iter().product();
    if bytes.len() != n * 4 {
        return Err(Error::shape(format!(
            "{}: expected {} bytes for shape {:?}, found {}",
            bin.display(),
            n * 4,
            header.shape,
            bytes.len()
        )));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok((header.shape, data))
}
