//! Named-tensor container file.
//!
//! Layout: the 8-byte magic `TSWEIGHT`, a little-endian `u64` header length,
//! a JSON header listing every entry (name, dtype, shape, byte offset into
//! the data section) plus free-form string metadata, then the data section
//! of raw little-endian `f32` values in entry order.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Real, Tensor};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"TSWEIGHT";

#[derive(Serialize, Deserialize)]
struct Header {
    metadata: BTreeMap<String, String>,
    tensors: Vec<EntryHeader>,
}

#[derive(Serialize, Deserialize)]
struct EntryHeader {
    name: String,
    dtype: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct WeightContainer {
    pub metadata: BTreeMap<String, String>,
    entries: Vec<Entry>,
}

impl WeightContainer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert<T: Real>(&mut self, name: impl Into<String>, t: &Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.get(&name).is_some() {
            return Err(Error::Weights(format!("duplicate tensor name {name:?}")));
        }
        self.entries.push(Entry {
            name,
            shape: t.shape().to_vec(),
            data: t.data().iter().map(|v| v.f64() as f32).collect(),
        });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Entry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn entries(&self) -> &[Entry] {
        &self.entries
    }

    /// Look up `name` as a tensor of the expected shape.
    pub fn tensor<T: Real>(&self, name: &str, shape: &[usize]) -> Result<Tensor<T>> {
        let e = self
            .get(name)
            .ok_or_else(|| Error::Weights(format!("missing tensor {name:?}")))?;
        if e.shape != shape {
            return Err(Error::Weights(format!(
                "tensor {name:?} has shape {:?}, expected {shape:?}",
                e.shape
            )));
        }
        Tensor::new(
            shape.to_vec(),
            e.data.iter().map(|&v| T::c(v as f64)).collect(),
        )
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut offset = 0;
        let tensors = self
            .entries
            .iter()
            .map(|e| {
                let h = EntryHeader {
                    name: e.name.clone(),
                    dtype: "f32".into(),
                    shape: e.shape.clone(),
                    offset,
                };
                offset += e.data.len() * 4;
                h
            })
            .collect();
        let header = serde_json::to_vec(&Header {
            metadata: self.metadata.clone(),
            tensors,
        })
        .expect("header serializes");
        let mut out = Vec::with_capacity(16 + header.len() + offset);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for e in &self.entries {
            for v in &e.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(Error::parse(0, "not a weight container (bad magic)"));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let hend = 16usize
            .checked_add(hlen)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| Error::parse(8, "header length exceeds file"))?;
        let header: Header = serde_json::from_slice(&bytes[16..hend])
            .map_err(|e| Error::parse(16, format!("header: {e}")))?;
        let data = &bytes[hend..];
        let mut entries = Vec::with_capacity(header.tensors.len());
        let mut expected_offset = 0;
        for h in header.tensors {
            if h.dtype != "f32" {
                return Err(Error::Weights(format!(
                    "tensor {:?}: unsupported dtype {}",
                    h.name, h.dtype
                )));
            }
            if h.offset != expected_offset {
                return Err(Error::parse(
                    hend + h.offset,
                    format!("tensor {:?} offset {} not contiguous", h.name, h.offset),
                ));
            }
            let n: usize = h.shape.iter().product();
            let end = h.offset + n * 4;
            if end > data.len() {
                return Err(Error::parse(
                    hend + h.offset,
                    format!("tensor {:?} truncated", h.name),
                ));
            }
            let vals = data[h.offset..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            expected_offset = end;
            entries.push(Entry {
                name: h.name,
                shape: h.shape,
                data: vals,
            });
        }
        if expected_offset != data.len() {
            return Err(Error::parse(
                hend + expected_offset,
                "trailing bytes after last tensor",
            ));
        }
        Ok(Self {
            metadata: header.metadata,
            entries,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bytes_round_trip_exactly() {
        let mut c = WeightContainer::new();
        c.metadata.insert("step".into(), "12".into());
        c.insert("a", &Tensor::new([2, 2], vec![1.0f32, -0.0, f32::MIN_POSITIVE, 3.5]).unwrap())
            .unwrap();
        c.insert("b", &Tensor::new([3], vec![1e-30f64, 2.0, -7.25]).unwrap())
            .unwrap();
        let bytes = c.to_bytes();
        let back = WeightContainer::from_bytes(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        assert!(WeightContainer::from_bytes(b"NOTMAGIC\0\0\0\0\0\0\0\0").is_err());
        let mut c = WeightContainer::new();
        c.insert("a", &Tensor::new([4], vec![1.0f32; 4]).unwrap()).unwrap();
        let bytes = c.to_bytes();
        let err = WeightContainer::from_bytes(&bytes[..bytes.len() - 2]).unwrap_err();
        assert!(matches!(err, Error::Parse { .. }), "{err}");
    }

    #[test]
    fn shape_and_name_mismatch_are_reported() {
        let mut c = WeightContainer::new();
        c.insert("a", &Tensor::new([4], vec![1.0f32; 4]).unwrap()).unwrap();
        let e = c.tensor::<f32>("a", &[2, 2]).unwrap_err().to_string();
        assert!(e.contains("[4]") && e.contains("[2, 2]"), "{e}");
        let e = c.tensor::<f32>("b", &[4]).unwrap_err().to_string();
        assert!(e.contains("\"b\""), "{e}");
        assert!(c.insert("a", &Tensor::<f32>::zeros([1])).is_err());
    }
}
