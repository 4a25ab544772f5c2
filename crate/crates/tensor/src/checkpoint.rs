//! Self-describing binary checkpoint container.
//!
//! Layout: magic `TTCP`, u32 version, u64 header length, JSON header
//! (metadata + tensor directory), then raw little-endian float payload.
//! Floats are stored at their native width so a save/load round trip is
//! bit-exact.

use crate::{Real, Result, Tensor, TensorError};
use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"TTCP";

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    dtype: String,
    meta: serde_json::Value,
    entries: Vec<TensorEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub len: u64,
}

/// An in-memory checkpoint: arbitrary JSON metadata plus named tensors.
#[derive(Debug, Clone)]
pub struct CheckpointFile<R: Real> {
    pub meta: serde_json::Value,
    pub tensors: BTreeMap<String, Tensor<R>>,
}

impl<R: Real> CheckpointFile<R> {
    pub fn new(meta: serde_json::Value) -> Self {
        CheckpointFile { meta, tensors: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: &str, t: Tensor<R>) {
        self.tensors.insert(name.to_string(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<R>> {
        self.tensors.get(name)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut entries = Vec::with_capacity(self.tensors.len());
        let mut offset = 0u64;
        for (name, t) in &self.tensors {
            entries.push(TensorEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                offset,
                len: t.numel() as u64,
            });
            offset += t.numel() as u64;
        }
        let header = Header {
            dtype: R::DTYPE.to_string(),
            meta: self.meta.clone(),
            entries,
        };
        let header_bytes = serde_json::to_vec(&header)
            .map_err(|e| TensorError::CheckpointFormat(e.to_string()))?;

        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        w.write_all(MAGIC)?;
        w.write_u32::<LittleEndian>(CHECKPOINT_VERSION)?;
        w.write_u64::<LittleEndian>(header_bytes.len() as u64)?;
        w.write_all(&header_bytes)?;
        for (_, t) in &self.tensors {
            match R::DTYPE {
                "f32" => {
                    for &v in t.data() {
                        w.write_f32::<LittleEndian>(v.as_f64() as f32)?;
                    }
                }
                _ => {
                    for &v in t.data() {
                        w.write_f64::<LittleEndian>(v.as_f64())?;
                    }
                }
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(TensorError::CheckpointFormat("bad magic".into()));
        }
        let version = r.read_u32::<LittleEndian>()?;
        if version != CHECKPOINT_VERSION {
            return Err(TensorError::CheckpointFormat(format!(
                "unsupported version {version}"
            )));
        }
        let header_len = r.read_u64::<LittleEndian>()? as usize;
        let mut header_bytes = vec![0u8; header_len];
        r.read_exact(&mut header_bytes)?;
        let header: Header = serde_json::from_slice(&header_bytes)
            .map_err(|e| TensorError::CheckpointFormat(e.to_string()))?;
        if header.dtype != R::DTYPE {
            return Err(TensorError::CheckpointFormat(format!(
                "dtype mismatch: file has {}, requested {}",
                header.dtype,
                R::DTYPE
            )));
        }
        let mut tensors = BTreeMap::new();
        for entry in &header.entries {
            let mut data = Vec::with_capacity(entry.len as usize);
            for _ in 0..entry.len {
                let v = match R::DTYPE {
                    "f32" => R::from_f64(r.read_f32::<LittleEndian>()? as f64),
                    _ => R::from_f64(r.read_f64::<LittleEndian>()?),
                };
                data.push(v);
            }
            tensors.insert(entry.name.clone(), Tensor::new(entry.shape.clone(), data)?);
        }
        Ok(CheckpointFile { meta: header.meta, tensors })
    }
}
