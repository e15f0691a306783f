//! Versioned binary container of named `f64` tensors plus a JSON metadata
//! blob. Used for checkpoints and for pretrained-weight bundles.
//!
//! Layout: `b"CADA"` magic, `u32` LE format version, `u64` LE header length,
//! JSON header (metadata and tensor directory), then the raw tensor payload
//! as little-endian `f64` in directory order.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"CADA";
const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// Offset into the payload, in f64 elements.
    offset: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    meta: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

/// In-memory view of a container file.
#[derive(Clone, Debug, Default)]
pub struct Container {
    pub meta: serde_json::Value,
    tensors: BTreeMap<String, ArrayD<f64>>,
}

impl Container {
    pub fn new(meta: serde_json::Value) -> Self {
        Self {
            meta,
            tensors: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: ArrayD<f64>) {
        self.tensors.insert(name.into(), tensor);
    }

    pub fn tensor(&self, name: &str) -> Option<&ArrayD<f64>> {
        self.tensors.get(name)
    }

    pub fn require(&self, name: &str) -> Result<&ArrayD<f64>> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Container(format!("missing tensor {name:?}")))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(|s| s.as_str())
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// String field from the metadata blob.
    pub fn meta_str(&self, key: &str) -> Result<&str> {
        self.meta
            .get(key)
            .and_then(|v| v.as_str())
            .ok_or_else(|| Error::Container(format!("missing metadata field {key:?}")))
    }

    /// Unsigned integer field from the metadata blob.
    pub fn meta_u64(&self, key: &str) -> Result<u64> {
        self.meta
            .get(key)
            .and_then(|v| v.as_u64())
            .ok_or_else(|| Error::Container(format!("missing metadata field {key:?}")))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut entries = Vec::with_capacity(self.tensors.len());
        let mut offset = 0u64;
        for (name, tensor) in &self.tensors {
            entries.push(TensorEntry {
                name: name.clone(),
                shape: tensor.shape().to_vec(),
                offset,
            });
            offset += tensor.len() as u64;
        }
        let header = Header {
            meta: self.meta.clone(),
            tensors: entries,
        };
        let header_bytes =
            serde_json::to_vec(&header).map_err(|e| Error::Container(e.to_string()))?;

        let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
        file.write_all(MAGIC)?;
        file.write_all(&FORMAT_VERSION.to_le_bytes())?;
        file.write_all(&(header_bytes.len() as u64).to_le_bytes())?;
        file.write_all(&header_bytes)?;
        for tensor in self.tensors.values() {
            for v in tensor.iter() {
                file.write_all(&v.to_le_bytes())?;
            }
        }
        file.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut file = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut magic = [0u8; 4];
        file.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Container(format!(
                "{} is not a container file (bad magic)",
                path.display()
            )));
        }
        let mut word = [0u8; 4];
        file.read_exact(&mut word)?;
        let version = u32::from_le_bytes(word);
        if version != FORMAT_VERSION {
            return Err(Error::Container(format!(
                "unsupported container version {version} (expected {FORMAT_VERSION})"
            )));
        }
        let mut len = [0u8; 8];
        file.read_exact(&mut len)?;
        let header_len = u64::from_le_bytes(len) as usize;
        let mut header_bytes = vec![0u8; header_len];
        file.read_exact(&mut header_bytes)?;
        let header: Header =
            serde_json::from_slice(&header_bytes).map_err(|e| Error::Container(e.to_string()))?;

        let mut payload = Vec::new();
        file.read_to_end(&mut payload)?;
        if payload.len() % 8 != 0 {
            return Err(Error::Container("truncated payload".into()));
        }
        let values: Vec<f64> = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();

        let mut tensors = BTreeMap::new();
        for entry in header.tensors {
            let count: usize = entry.shape.iter().product();
            let start = entry.offset as usize;
            let end = start + count;
            if end > values.len() {
                return Err(Error::Container(format!(
                    "tensor {:?} overruns payload",
                    entry.name
                )));
            }
            let data = values[start..end].to_vec();
            let tensor = ArrayD::from_shape_vec(IxDyn(&entry.shape), data)
                .map_err(|e| Error::Container(e.to_string()))?;
            tensors.insert(entry.name, tensor);
        }
        Ok(Self {
            meta: header.meta,
            tensors,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn round_trip_preserves_tensors_and_meta() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("test.cada");

        let mut c = Container::new(serde_json::json!({"purpose": "test", "epoch": 3}));
        c.insert("a.weight", array![[1.0, 2.0], [3.0, -4.5]].into_dyn());
        c.insert("b.bias", array![0.25, -0.125].into_dyn());
        c.save(&path).unwrap();

        let back = Container::load(&path).unwrap();
        assert_eq!(back.meta_u64("epoch").unwrap(), 3);
        assert_eq!(back.require("a.weight").unwrap(), c.require("a.weight").unwrap());
        assert_eq!(back.require("b.bias").unwrap(), c.require("b.bias").unwrap());
        assert!(back.tensor("missing").is_none());
    }

    #[test]
    fn bad_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.bin");
        std::fs::write(&path, b"NOPE1234").unwrap();
        assert!(matches!(Container::load(&path), Err(Error::Container(_))));
    }
}
