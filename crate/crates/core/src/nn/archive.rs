//! Versioned binary tensor container.
//!
//! Layout (little endian):
//!
//! ```text
//! magic   8 bytes  "STCLCKPT"
//! version u32
//! hlen    u64      length of the JSON header
//! header  hlen     {"meta": ..., "tensors": [{"name", "shape", "offset"}]}
//! data             concatenated f64 values, in header order
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use super::device;
use crate::{Error, Result};

pub const ARCHIVE_MAGIC: &[u8; 8] = b"STCLCKPT";
pub const ARCHIVE_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TensorArchive {
    pub meta: serde_json::Value,
    pub tensors: BTreeMap<String, (Vec<usize>, Vec<f64>)>,
}

#[derive(Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    meta: serde_json::Value,
    tensors: Vec<Entry>,
}

impl TensorArchive {
    pub fn new(meta: serde_json::Value) -> Self {
        Self {
            meta,
            tensors: BTreeMap::new(),
        }
    }

    pub fn put(&mut self, name: impl Into<String>, tensor: &Tensor) -> Result<()> {
        let values = tensor.flatten_all()?.to_vec1::<f64>()?;
        self.tensors.insert(name.into(), (tensor.dims().to_vec(), values));
        Ok(())
    }

    pub fn put_raw(&mut self, name: impl Into<String>, shape: Vec<usize>, values: Vec<f64>) {
        self.tensors.insert(name.into(), (shape, values));
    }

    pub fn get(&self, name: &str) -> Result<Tensor> {
        let (shape, values) = self
            .tensors
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
        Ok(Tensor::from_vec(values.clone(), shape.as_slice(), &device())?)
    }

    pub fn get_raw(&self, name: &str) -> Option<&(Vec<usize>, Vec<f64>)> {
        self.tensors.get(name)
    }

    /// Tensors whose names start with `prefix`, with the prefix stripped.
    pub fn with_prefix(&self, prefix: &str) -> Result<BTreeMap<String, Tensor>> {
        self.tensors
            .keys()
            .filter_map(|k| k.strip_prefix(prefix).map(|s| (s.to_string(), k)))
            .map(|(short, full)| Ok((short, self.get(full)?)))
            .collect()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut offset = 0;
        let entries = self
            .tensors
            .iter()
            .map(|(name, (shape, values))| {
                let e = Entry {
                    name: name.clone(),
                    shape: shape.clone(),
                    offset,
                };
                offset += values.len();
                e
            })
            .collect();
        let header = serde_json::to_vec(&Header {
            meta: self.meta.clone(),
            tensors: entries,
        })?;
        let mut out = Vec::with_capacity(20 + header.len() + offset * 8);
        out.extend_from_slice(ARCHIVE_MAGIC);
        out.extend_from_slice(&ARCHIVE_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for (_, values) in self.tensors.values() {
            for v in values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 20 || &bytes[..8] != ARCHIVE_MAGIC {
            return Err(bad("not a checkpoint archive"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != ARCHIVE_VERSION {
            return Err(Error::Checkpoint(format!("unsupported archive version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let header_end = 20usize.checked_add(hlen).filter(|&e| e <= bytes.len()).ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(&bytes[20..header_end])?;
        let data = &bytes[header_end..];
        let mut tensors = BTreeMap::new();
        for e in header.tensors {
            let n: usize = e.shape.iter().product();
            let start = e.offset * 8;
            let end = start + n * 8;
            if end > data.len() {
                return Err(Error::Checkpoint(format!("truncated data for {}", e.name)));
            }
            let values = data[start..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            tensors.insert(e.name, (e.shape, values));
        }
        Ok(Self {
            meta: header.meta,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
