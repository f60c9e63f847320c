//! Portable tensor archive.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! b"GATA" | version: u32 | header_len: u64 | header: JSON (header_len bytes) | payloads
//! ```
//!
//! The header is `{"meta": <any JSON>, "tensors": [{"name", "dtype", "shape"}, ...]}`.
//! Payloads follow in header order, row-major, each `numel × sizeof(dtype)`
//! bytes. `f32` payloads are widened to `f64` on read and narrowed back on
//! write, which is exact for values that originated as `f32`.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::numgrad::Tensor;

pub const MAGIC: &[u8; 4] = b"GATA";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ArchiveError {
    #[error("not a tensor archive (bad magic bytes)")]
    BadMagic,
    #[error("unsupported archive version {0} (expected {VERSION})")]
    Version(u32),
    #[error("archive ends inside the {0}")]
    TruncatedPreamble(&'static str),
    #[error("malformed archive header: {0}")]
    Header(String),
    #[error("payload of tensor '{name}' is truncated: need {need} bytes, {have} left")]
    Truncated {
        name: String,
        need: usize,
        have: usize,
    },
    #[error("{0} unexpected bytes after the last payload")]
    TrailingBytes(usize),
    #[error("tensor '{0}' is not finite")]
    NonFinite(String),
    #[error("tensor '{0}' is missing")]
    Missing(String),
    #[error("tensor '{name}' has shape {found:?}, expected {expected:?}")]
    Shape {
        name: String,
        found: Vec<usize>,
        expected: Vec<usize>,
    },
    #[error("duplicate tensor name '{0}'")]
    Duplicate(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct Entry {
    name: String,
    dtype: DType,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    meta: Value,
    tensors: Vec<Entry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub dtype: DType,
    pub tensor: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Archive {
    pub meta: Value,
    pub tensors: Vec<NamedTensor>,
}

impl Default for Archive {
    fn default() -> Self {
        Self::new(Value::Null)
    }
}

impl Archive {
    pub fn new(meta: Value) -> Self {
        Self {
            meta,
            tensors: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, dtype: DType, tensor: Tensor) {
        self.tensors.push(NamedTensor {
            name: name.into(),
            dtype,
            tensor,
        });
    }

    pub fn get(&self, name: &str) -> Option<&NamedTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    /// Looks up `name` and checks its shape.
    pub fn expect(&self, name: &str, shape: &[usize]) -> Result<&Tensor, ArchiveError> {
        let t = self
            .get(name)
            .ok_or_else(|| ArchiveError::Missing(name.to_string()))?;
        if t.tensor.shape() != shape {
            return Err(ArchiveError::Shape {
                name: name.to_string(),
                found: t.tensor.shape().to_vec(),
                expected: shape.to_vec(),
            });
        }
        Ok(&t.tensor)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            meta: self.meta.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|t| Entry {
                    name: t.name.clone(),
                    dtype: t.dtype,
                    shape: t.tensor.shape().to_vec(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let payload: usize = self
            .tensors
            .iter()
            .map(|t| t.tensor.len() * t.dtype.size())
            .sum();
        let mut out = Vec::with_capacity(16 + json.len() + payload);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for t in &self.tensors {
            match t.dtype {
                DType::F64 => t
                    .tensor
                    .data()
                    .iter()
                    .for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                DType::F32 => t
                    .tensor
                    .data()
                    .iter()
                    .for_each(|&x| out.extend_from_slice(&(x as f32).to_le_bytes())),
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ArchiveError> {
        if bytes.len() < 4 {
            return Err(ArchiveError::TruncatedPreamble("magic"));
        }
        if &bytes[..4] != MAGIC {
            return Err(ArchiveError::BadMagic);
        }
        let version = u32::from_le_bytes(
            bytes
                .get(4..8)
                .ok_or(ArchiveError::TruncatedPreamble("version"))?
                .try_into()
                .unwrap(),
        );
        if version != VERSION {
            return Err(ArchiveError::Version(version));
        }
        let header_len = u64::from_le_bytes(
            bytes
                .get(8..16)
                .ok_or(ArchiveError::TruncatedPreamble("header length"))?
                .try_into()
                .unwrap(),
        ) as usize;
        let header_end = 16usize
            .checked_add(header_len)
            .ok_or(ArchiveError::TruncatedPreamble("header"))?;
        let raw = bytes
            .get(16..header_end)
            .ok_or(ArchiveError::TruncatedPreamble("header"))?;
        let header: Header =
            serde_json::from_slice(raw).map_err(|e| ArchiveError::Header(e.to_string()))?;

        let mut seen = std::collections::BTreeSet::new();
        let mut pos = header_end;
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for entry in header.tensors {
            if !seen.insert(entry.name.clone()) {
                return Err(ArchiveError::Duplicate(entry.name));
            }
            let numel = entry
                .shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| {
                    ArchiveError::Header(format!("shape of '{}' overflows", entry.name))
                })?;
            let need = numel.checked_mul(entry.dtype.size()).ok_or_else(|| {
                ArchiveError::Header(format!("shape of '{}' overflows", entry.name))
            })?;
            let have = bytes.len() - pos;
            if have < need {
                return Err(ArchiveError::Truncated {
                    name: entry.name,
                    need,
                    have,
                });
            }
            let chunk = &bytes[pos..pos + need];
            pos += need;
            let data: Vec<f64> = match entry.dtype {
                DType::F64 => chunk
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
                DType::F32 => chunk
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                    .collect(),
            };
            if data.iter().any(|x| !x.is_finite()) {
                return Err(ArchiveError::NonFinite(entry.name));
            }
            let tensor =
                Tensor::new(&entry.shape, data).map_err(|e| ArchiveError::Header(e.to_string()))?;
            tensors.push(NamedTensor {
                name: entry.name,
                dtype: entry.dtype,
                tensor,
            });
        }
        if pos != bytes.len() {
            return Err(ArchiveError::TrailingBytes(bytes.len() - pos));
        }
        Ok(Self {
            meta: header.meta,
            tensors,
        })
    }

    pub fn read(path: &Path) -> crate::error::Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| crate::error::Error::io(path, e))?;
        Self::from_bytes(&bytes)
            .map_err(|e| crate::error::Error::Data(format!("{}: {e}", path.display())))
    }

    pub fn write(&self, path: &Path) -> crate::error::Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| crate::error::Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn sample() -> Archive {
        let mut a = Archive::new(json!({"kind": "test", "n": 2}));
        a.push(
            "a",
            DType::F64,
            Tensor::new(&[2, 2], vec![1.0, -2.5, 3.25, 1e-300]).unwrap(),
        );
        a.push(
            "b",
            DType::F32,
            Tensor::new(&[3], vec![0.5, 0.1f32 as f64, -7.0]).unwrap(),
        );
        a
    }

    #[test]
    fn layout_prefix() {
        let bytes = sample().to_bytes();
        assert_eq!(&bytes[..4], b"GATA");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        let hl = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        assert_eq!(bytes.len(), 16 + hl + 4 * 8 + 3 * 4);
        let header: Value = serde_json::from_slice(&bytes[16..16 + hl]).unwrap();
        assert_eq!(header["tensors"][1]["dtype"], "f32");
        assert_eq!(header["tensors"][0]["shape"], json!([2, 2]));
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let bytes = sample().to_bytes();
        let back = Archive::from_bytes(&bytes).unwrap();
        assert_eq!(back, sample());
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn truncation_names_tensor() {
        let bytes = sample().to_bytes();
        let err = Archive::from_bytes(&bytes[..bytes.len() - 1]).unwrap_err();
        assert!(
            matches!(&err, ArchiveError::Truncated { name, .. } if name == "b"),
            "{err}"
        );
        assert!(err.to_string().contains("'b'"));
    }

    #[test]
    fn bad_magic_and_version() {
        let mut bytes = sample().to_bytes();
        bytes[0] = b'X';
        assert!(matches!(
            Archive::from_bytes(&bytes),
            Err(ArchiveError::BadMagic)
        ));
        let mut bytes = sample().to_bytes();
        bytes[4] = 9;
        assert!(matches!(
            Archive::from_bytes(&bytes),
            Err(ArchiveError::Version(9))
        ));
        assert!(matches!(
            Archive::from_bytes(b"GA"),
            Err(ArchiveError::TruncatedPreamble(_))
        ));
    }

    #[test]
    fn trailing_bytes_rejected() {
        let mut bytes = sample().to_bytes();
        bytes.push(0);
        assert!(matches!(
            Archive::from_bytes(&bytes),
            Err(ArchiveError::TrailingBytes(1))
        ));
    }

    #[test]
    fn expect_checks_shape() {
        let a = sample();
        assert!(a.expect("a", &[2, 2]).is_ok());
        assert!(matches!(
            a.expect("a", &[4]),
            Err(ArchiveError::Shape { .. })
        ));
        assert!(matches!(
            a.expect("zz", &[4]),
            Err(ArchiveError::Missing(_))
        ));
    }
}
