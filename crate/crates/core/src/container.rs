//! Versioned binary container for parameter tensors.
//!
//! Layout (all integers little-endian):
//!
//! | bytes        | content                                            |
//! |--------------|----------------------------------------------------|
//! | 8            | magic `TCNNCTR\0`                                  |
//! | 4            | format version (`u32`, currently 1)                |
//! | 8            | header length `h` (`u64`)                          |
//! | h            | UTF-8 JSON header: `{"kind", "meta", "tensors"}`   |
//! | 8 · Σ|shape| | tensor payloads, `f64` little-endian, header order |
//!
//! `tensors` lists `{"name", "shape"}` entries; payloads are row-major.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"TCNNCTR\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    kind: String,
    meta: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub kind: String,
    pub meta: serde_json::Value,
    tensors: Vec<(String, Tensor<f64>)>,
}

impl Container {
    pub fn new(kind: &str, meta: serde_json::Value) -> Self {
        Self { kind: kind.to_string(), meta, tensors: Vec::new() }
    }

    pub fn push<T: Scalar>(&mut self, name: impl Into<String>, t: &Tensor<T>) {
        self.tensors.push((name.into(), t.cast()));
    }

    pub fn get<T: Scalar>(&self, name: &str) -> Result<Tensor<T>> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t.cast())
            .ok_or_else(|| Error::Format(format!("{} container has no tensor `{name}`", self.kind)))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.iter().map(|(n, _)| n.as_str())
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind != kind {
            return Err(Error::Format(format!("expected a {kind} container, found {}", self.kind)));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            kind: self.kind.clone(),
            meta: self.meta.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|(name, t)| TensorEntry { name: name.clone(), shape: t.shape().to_vec() })
                .collect(),
        };
        let header = serde_json::to_vec(&header)?;
        let payload: usize = self.tensors.iter().map(|(_, t)| t.len() * 8).sum();
        let mut out = Vec::with_capacity(20 + header.len() + payload);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for (_, t) in &self.tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(Error::Format("missing container magic".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(Error::UnsupportedVersion { found: version, supported: FORMAT_VERSION });
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let body = &bytes[20..];
        if body.len() < hlen {
            return Err(Error::Format("truncated header".into()));
        }
        let header: Header = serde_json::from_slice(&body[..hlen])?;
        let mut rest = &body[hlen..];
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for entry in header.tensors {
            let n: usize = entry.shape.iter().product();
            if rest.len() < n * 8 {
                return Err(Error::Format(format!("truncated payload for `{}`", entry.name)));
            }
            let data = rest[..n * 8]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            rest = &rest[n * 8..];
            tensors.push((entry.name, Tensor::from_vec(&entry.shape, data)?));
        }
        if !rest.is_empty() {
            return Err(Error::Format(format!("{} trailing bytes", rest.len())));
        }
        Ok(Self { kind: header.kind, meta: header.meta, tensors })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn unknown_version_rejected() {
        let mut c = Container::new("gmm", serde_json::json!({"k": 2}));
        c.push("w", &Tensor::vector(vec![0.5f64, 0.5]));
        let mut bytes = c.to_bytes().unwrap();
        bytes[8] = 9;
        assert!(matches!(
            Container::from_bytes(&bytes),
            Err(Error::UnsupportedVersion { found: 9, .. })
        ));
        bytes[0] = b'X';
        assert!(matches!(Container::from_bytes(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn truncated_payload_rejected() {
        let mut c = Container::new("x", serde_json::Value::Null);
        c.push("t", &Tensor::vector(vec![1.0f64, 2.0, 3.0]));
        let bytes = c.to_bytes().unwrap();
        assert!(Container::from_bytes(&bytes[..bytes.len() - 3]).is_err());
    }

    proptest! {
        #[test]
        fn roundtrip_is_lossless(values in prop::collection::vec(-1e12f64..1e12, 1..64), rows in 1usize..4) {
            let n = values.len() - values.len() % rows;
            prop_assume!(n > 0);
            let t = Tensor::from_vec(&[rows, n / rows], values[..n].to_vec()).unwrap();
            let mut c = Container::new("test", serde_json::json!({"a": [1, 2]}));
            c.push("t", &t);
            let back = Container::from_bytes(&c.to_bytes().unwrap()).unwrap();
            prop_assert_eq!(&back, &c);
            prop_assert_eq!(back.get::<f64>("t").unwrap(), t);
        }
    }
}
