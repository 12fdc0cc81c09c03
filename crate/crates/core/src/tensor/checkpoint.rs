//! Binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "MTUW" | version: u32 | header_len: u32 | header: UTF-8 JSON | f32 blob
//! ```
//!
//! The header is `{"config": <any JSON>, "tensors": [{"name", "shape", "offset"}]}`
//! where `offset` is the byte offset of the tensor inside the blob.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const MAGIC: &[u8; 4] = b"MTUW";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Header {
    config: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

/// Contents of a loaded checkpoint. Values are held at the stored `f32`
/// precision.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub version: u32,
    pub config: serde_json::Value,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }
}

pub fn write_checkpoint<T: Scalar, W: Write>(
    mut out: W,
    config: &serde_json::Value,
    tensors: &[(&str, &Tensor<T>)],
) -> Result<()> {
    let mut entries = Vec::with_capacity(tensors.len());
    let mut offset = 0u64;
    for (name, t) in tensors {
        entries.push(TensorEntry {
            name: (*name).to_string(),
            shape: t.shape().to_vec(),
            offset,
        });
        offset += 4 * t.numel() as u64;
    }
    let header = serde_json::to_vec(&Header {
        config: config.clone(),
        tensors: entries,
    })?;
    let header_len = u32::try_from(header.len())
        .map_err(|_| Error::Checkpoint("header larger than 4 GiB".into()))?;

    out.write_all(MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    out.write_all(&header_len.to_le_bytes())?;
    out.write_all(&header)?;
    let mut blob = Vec::with_capacity(offset as usize);
    for (_, t) in tensors {
        for v in t.data() {
            let f = v.to_f32().ok_or(Error::NonFinite("checkpoint"))?;
            blob.extend_from_slice(&f.to_le_bytes());
        }
    }
    out.write_all(&blob)?;
    Ok(())
}

pub fn read_checkpoint<R: Read>(mut input: R) -> Result<Checkpoint> {
    let mut fixed = [0u8; 12];
    input.read_exact(&mut fixed)?;
    if &fixed[..4] != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = u32::from_le_bytes(fixed[4..8].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let header_len = u32::from_le_bytes(fixed[8..12].try_into().expect("4 bytes")) as usize;
    let mut header = vec![0u8; header_len];
    input.read_exact(&mut header)?;
    let header: Header = serde_json::from_slice(&header)?;
    let mut blob = Vec::new();
    input.read_to_end(&mut blob)?;

    let mut tensors = Vec::with_capacity(header.tensors.len());
    for entry in header.tensors {
        let numel: usize = entry.shape.iter().product();
        let start = entry.offset as usize;
        let end = start + 4 * numel;
        let bytes = blob.get(start..end).ok_or_else(|| {
            Error::Checkpoint(format!("tensor {} runs past the end of the blob", entry.name))
        })?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        tensors.push((entry.name, Tensor::new(entry.shape, data)?));
    }
    Ok(Checkpoint {
        version,
        config: header.config,
        tensors,
    })
}

pub fn save<T: Scalar>(
    path: impl AsRef<Path>,
    config: &serde_json::Value,
    tensors: &[(&str, &Tensor<T>)],
) -> Result<()> {
    let mut buf = Vec::new();
    write_checkpoint(&mut buf, config, tensors)?;
    crate::io::write_atomic(path.as_ref(), &buf)
}

pub fn load(path: impl AsRef<Path>) -> Result<Checkpoint> {
    read_checkpoint(fs::File::open(path)?)
}
