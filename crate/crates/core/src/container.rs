//! Binary container for weight-like artifacts.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    8 bytes   b"MTS2GBIN"
//! version  u32       1
//! index    u64 n + n bytes of UTF-8 JSON
//! blob     f32 values, concatenated in index order
//! ```
//!
//! The JSON index is `{"kind", "meta", "tensors": [{"name", "shape", "offset", "len"}]}`
//! where `offset` and `len` count f32 elements from the start of the blob.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"MTS2GBIN";
pub const CONTAINER_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn from_f64(name: &str, shape: Vec<usize>, data: &[f64]) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self {
            name: name.to_string(),
            shape,
            data: data.iter().map(|&v| v as f32).collect(),
        }
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| f64::from(v)).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub kind: String,
    pub meta: serde_json::Value,
    pub tensors: Vec<Tensor>,
}

#[derive(Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    len: usize,
}

#[derive(Serialize, Deserialize)]
struct Index {
    kind: String,
    meta: serde_json::Value,
    tensors: Vec<Entry>,
}

impl Container {
    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| Error::Artifact(format!("container `{}` lacks tensor `{name}`", self.kind)))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut offset = 0;
        let entries = self
            .tensors
            .iter()
            .map(|t| {
                let e = Entry {
                    name: t.name.clone(),
                    shape: t.shape.clone(),
                    offset,
                    len: t.data.len(),
                };
                offset += t.data.len();
                e
            })
            .collect();
        let index = serde_json::to_vec(&Index {
            kind: self.kind.clone(),
            meta: self.meta.clone(),
            tensors: entries,
        })?;
        let mut out = Vec::with_capacity(20 + index.len() + 4 * offset);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CONTAINER_VERSION.to_le_bytes());
        out.extend_from_slice(&(index.len() as u64).to_le_bytes());
        out.extend_from_slice(&index);
        for t in &self.tensors {
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Artifact(format!("malformed container: {m}"));
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("missing magic"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != CONTAINER_VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let index_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let blob_start = 20usize.checked_add(index_len).filter(|&e| e <= bytes.len()).ok_or_else(|| bad("truncated index"))?;
        let index: Index = serde_json::from_slice(&bytes[20..blob_start])?;
        let blob = &bytes[blob_start..];
        if !blob.len().is_multiple_of(4) {
            return Err(bad("blob is not a whole number of f32 values"));
        }
        let floats: Vec<f32> = blob
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let tensors = index
            .tensors
            .into_iter()
            .map(|e| {
                let end = e.offset.checked_add(e.len).filter(|&x| x <= floats.len());
                match end {
                    Some(end) if e.shape.iter().product::<usize>() == e.len => Ok(Tensor {
                        name: e.name,
                        shape: e.shape,
                        data: floats[e.offset..end].to_vec(),
                    }),
                    _ => Err(bad(&format!("tensor `{}` out of bounds", e.name))),
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Container {
            kind: index.kind,
            meta: index.meta,
            tensors,
        })
    }
}
