//! Single-file checkpoints: a versioned text header, a JSON manifest that
//! documents every blob's byte range, then the raw little-endian blobs.
//!
//! ```text
//! WCOMPCKPT 1\n
//! <manifest length in bytes>\n
//! <manifest JSON>
//! <blob bytes, concatenated in manifest order>
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::tensor::{Dtype, Real, Tensor};

pub const MAGIC: &str = "WCOMPCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlobEntry {
    pub name: String,
    pub dtype: Dtype,
    pub shape: Vec<usize>,
    /// Byte offset from the start of the blob section.
    pub offset: usize,
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    /// `"companded"` for training state, `"plain"` for baked networks.
    pub kind: String,
    pub byte_order: String,
    /// Free-form metadata (architecture, reparameterization, trainer state).
    pub meta: Value,
    pub blobs: Vec<BlobEntry>,
}

/// Checkpoint under construction or loaded from disk.
#[derive(Debug, Clone)]
pub struct CheckpointFile {
    pub manifest: Manifest,
    data: Vec<u8>,
}

impl CheckpointFile {
    pub fn new(kind: &str, meta: Value) -> Self {
        CheckpointFile {
            manifest: Manifest {
                format_version: FORMAT_VERSION,
                kind: kind.to_string(),
                byte_order: "little".to_string(),
                meta,
                blobs: Vec::new(),
            },
            data: Vec::new(),
        }
    }

    pub fn kind(&self) -> &str {
        &self.manifest.kind
    }

    pub fn meta(&self) -> &Value {
        &self.manifest.meta
    }

    pub fn put<T: Real>(&mut self, name: impl Into<String>, t: &Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.entry(&name).is_some() {
            return Err(Error::Checkpoint(format!("duplicate blob `{name}`")));
        }
        let offset = self.data.len();
        for &x in t.data() {
            x.extend_le_bytes(&mut self.data);
        }
        self.manifest.blobs.push(BlobEntry {
            name,
            dtype: T::DTYPE,
            shape: t.shape().to_vec(),
            offset,
            len: self.data.len() - offset,
        });
        Ok(())
    }

    pub fn entry(&self, name: &str) -> Option<&BlobEntry> {
        self.manifest.blobs.iter().find(|b| b.name == name)
    }

    pub fn has(&self, name: &str) -> bool {
        self.entry(name).is_some()
    }

    pub fn get<T: Real>(&self, name: &str) -> Result<Tensor<T>> {
        let e = self
            .entry(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing blob `{name}`")))?;
        if e.dtype != T::DTYPE {
            return Err(Error::Checkpoint(format!(
                "blob `{name}` is {:?}, requested {:?}",
                e.dtype,
                T::DTYPE
            )));
        }
        let bytes = &self.data[e.offset..e.offset + e.len];
        let data = bytes
            .chunks_exact(T::DTYPE.size_of())
            .map(T::from_le_slice)
            .collect();
        Tensor::new(e.shape.clone(), data).map_err(|err| Error::Checkpoint(err.to_string()))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let manifest = serde_json::to_vec_pretty(&self.manifest).expect("manifest serializes");
        let mut out = format!("{MAGIC} {FORMAT_VERSION}\n{}\n", manifest.len()).into_bytes();
        out.extend(manifest);
        out.extend_from_slice(&self.data);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let corrupt = |what: &str| Error::Checkpoint(what.to_string());
        let mut lines = bytes.splitn(3, |&b| b == b'\n');
        let header = lines.next().ok_or_else(|| corrupt("empty file"))?;
        let header = std::str::from_utf8(header).map_err(|_| corrupt("header"))?;
        let version = header
            .strip_prefix(MAGIC)
            .and_then(|r| r.trim().parse::<u32>().ok())
            .ok_or_else(|| corrupt("bad magic"))?;
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported format version {version}")));
        }
        let len = lines
            .next()
            .and_then(|l| std::str::from_utf8(l).ok())
            .and_then(|l| l.trim().parse::<usize>().ok())
            .ok_or_else(|| corrupt("manifest length"))?;
        let rest = lines.next().ok_or_else(|| corrupt("missing manifest"))?;
        if rest.len() < len {
            return Err(corrupt("truncated manifest"));
        }
        let manifest: Manifest =
            serde_json::from_slice(&rest[..len]).map_err(|e| corrupt(&e.to_string()))?;
        let data = rest[len..].to_vec();
        for b in &manifest.blobs {
            let n: usize = b.shape.iter().product();
            if b.len != n * b.dtype.size_of()
                || b.offset.checked_add(b.len).is_none_or(|end| end > data.len())
            {
                return Err(corrupt(&format!("blob `{}` out of range", b.name)));
            }
        }
        Ok(CheckpointFile { manifest, data })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())
            .map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes =
            std::fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_and_corruption() {
        let mut ck = CheckpointFile::new("plain", serde_json::json!({"x": 0.1}));
        let t = Tensor::new(vec![2, 2], vec![1.0f64, -0.0, f64::MIN_POSITIVE, 3.5]).unwrap();
        ck.put("a", &t).unwrap();
        ck.put("b", &t.cast::<f32>()).unwrap();
        assert!(ck.put("a", &t).is_err());
        let bytes = ck.to_bytes();
        let back = CheckpointFile::from_bytes(&bytes).unwrap();
        assert!(back.get::<f64>("a").unwrap().bitwise_eq(&t));
        assert!(back.get::<f32>("b").is_ok());
        assert!(back.get::<f32>("a").is_err());
        assert_eq!(back.meta()["x"], 0.1);
        for cut in [0, 5, 20, bytes.len() - 1] {
            assert!(CheckpointFile::from_bytes(&bytes[..cut]).is_err());
        }
    }
}
