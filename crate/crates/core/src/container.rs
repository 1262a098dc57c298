//! Self-describing container of named LTF1 blobs ("LTCK").
//!
//! Layout: magic `LTCK`, u32 little-endian manifest length, UTF-8 JSON
//! manifest `{"meta": …, "blobs": [{"name", "offset", "length"}]}`, then the
//! concatenated blobs (offsets relative to the end of the manifest).

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ltf;
use crate::tensor::DenseTensor;

pub const MAGIC: &[u8; 4] = b"LTCK";

#[derive(Debug, Serialize, Deserialize)]
struct Entry {
    name: String,
    offset: u64,
    length: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    meta: serde_json::Value,
    blobs: Vec<Entry>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Container {
    pub meta: serde_json::Value,
    pub blobs: BTreeMap<String, DenseTensor>,
}

impl Container {
    pub fn new(meta: serde_json::Value) -> Self {
        Self { meta, blobs: BTreeMap::new() }
    }

    pub fn put(&mut self, name: impl Into<String>, t: DenseTensor) {
        self.blobs.insert(name.into(), t);
    }

    pub fn put_scalars(&mut self, name: impl Into<String>, v: &[f64]) {
        self.put(name, DenseTensor::new(vec![v.len().max(1)], if v.is_empty() { vec![0.0] } else { v.to_vec() }).expect("vector"));
    }

    pub fn get(&self, name: &str) -> Result<&DenseTensor> {
        self.blobs.get(name).ok_or_else(|| Error::Lookup(format!("container has no blob named {name}")))
    }

    pub fn scalars(&self, name: &str) -> Result<&[f64]> {
        Ok(self.get(name)?.values())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut data = Vec::new();
        let mut entries = Vec::with_capacity(self.blobs.len());
        for (name, t) in &self.blobs {
            let bytes = ltf::encode(t);
            entries.push(Entry { name: name.clone(), offset: data.len() as u64, length: bytes.len() as u64 });
            data.extend_from_slice(&bytes);
        }
        let manifest = serde_json::to_vec(&Manifest { meta: self.meta.clone(), blobs: entries }).expect("manifest serializes");
        let mut out = Vec::with_capacity(8 + manifest.len() + data.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(manifest.len() as u32).to_le_bytes());
        out.extend_from_slice(&manifest);
        out.extend_from_slice(&data);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, String> {
        if bytes.len() < 8 || &bytes[..4] != MAGIC {
            return Err("missing LTCK magic".into());
        }
        let n = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
        let start = 8 + n;
        if bytes.len() < start {
            return Err("truncated manifest".into());
        }
        let manifest: Manifest = serde_json::from_slice(&bytes[8..start]).map_err(|e| format!("bad manifest: {e}"))?;
        let data = &bytes[start..];
        let mut blobs = BTreeMap::new();
        for e in manifest.blobs {
            let (a, b) = (e.offset as usize, (e.offset + e.length) as usize);
            if b > data.len() || a > b {
                return Err(format!("blob {} extends past end of file", e.name));
            }
            let t = ltf::decode(&data[a..b]).map_err(|m| format!("blob {}: {m}", e.name))?;
            blobs.insert(e.name, t);
        }
        Ok(Self { meta: manifest.meta, blobs })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|msg| Error::Format { path: path.to_path_buf(), msg })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_exact() {
        let mut c = Container::new(serde_json::json!({"kind": "test"}));
        c.put("a", DenseTensor::from_fn(&[2, 3], |i| (i[0] as f64 + 0.1) / (i[1] as f64 + 0.3)));
        c.put_scalars("s", &[std::f64::consts::PI, -0.0, 1e-300]);
        let back = Container::from_bytes(&c.to_bytes()).unwrap();
        assert_eq!(back, c);
        assert!(Container::from_bytes(b"LTCX0000").is_err());
    }
}
