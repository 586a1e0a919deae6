//! Named-tensor archive used for weight export/import and checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic     4 bytes   "SVLA"
//! version   u32
//! hdr_len   u64
//! header    hdr_len bytes of UTF-8 JSON: {"tensors": [...], "metadata": {...}}
//! payload   concatenated tensor data, f64 little-endian, row-major
//! ```
//!
//! Each manifest entry lists `name`, `shape`, `dtype` ("f64"), and the byte
//! `offset`/`len` of its data inside the payload.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::autograd::Matrix;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"SVLA";
pub const FORMAT_VERSION: u32 = 1;
const DTYPE: &str = "f64";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub offset: u64,
    pub len: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    tensors: Vec<TensorEntry>,
    metadata: Value,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Archive {
    pub metadata: Value,
    pub tensors: Vec<(String, Matrix)>,
}

impl Archive {
    pub fn new(metadata: Value) -> Self {
        Self {
            metadata,
            tensors: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, value: Matrix) {
        self.tensors.push((name.into(), value));
    }

    pub fn get(&self, name: &str) -> Option<&Matrix> {
        self.tensors
            .iter()
            .find_map(|(n, m)| (n == name).then_some(m))
    }

    pub fn manifest(&self) -> Vec<TensorEntry> {
        let mut offset = 0u64;
        self.tensors
            .iter()
            .map(|(name, m)| {
                let len = (m.len() * 8) as u64;
                let entry = TensorEntry {
                    name: name.clone(),
                    shape: vec![m.nrows(), m.ncols()],
                    dtype: DTYPE.to_string(),
                    offset,
                    len,
                };
                offset += len;
                entry
            })
            .collect()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&Header {
            tensors: self.manifest(),
            metadata: self.metadata.clone(),
        })?;
        let payload_len: usize = self.tensors.iter().map(|(_, m)| m.len() * 8).sum();
        let mut out = Vec::with_capacity(16 + header.len() + payload_len);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for (_, m) in &self.tensors {
            for v in m.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let corrupt = |msg: &str| Error::CorruptArchive(msg.to_string());
        if bytes.len() < 16 || &bytes[..4] != MAGIC {
            return Err(corrupt("bad magic"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(Error::VersionMismatch {
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        let hdr_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let hdr_end = 16usize
            .checked_add(hdr_len)
            .filter(|end| *end <= bytes.len())
            .ok_or_else(|| corrupt("header length exceeds file"))?;
        let header: Header = serde_json::from_slice(&bytes[16..hdr_end])
            .map_err(|e| Error::CorruptArchive(format!("header: {e}")))?;
        let payload = &bytes[hdr_end..];
        let mut tensors = Vec::with_capacity(header.tensors.len());
        let mut expected_offset = 0u64;
        for entry in header.tensors {
            if entry.dtype != DTYPE {
                return Err(Error::CorruptArchive(format!(
                    "tensor `{}` has unsupported dtype {}",
                    entry.name, entry.dtype
                )));
            }
            let [rows, cols] = entry.shape[..] else {
                return Err(Error::CorruptArchive(format!(
                    "tensor `{}` is not 2-D",
                    entry.name
                )));
            };
            if entry.offset != expected_offset || entry.len != (rows * cols * 8) as u64 {
                return Err(Error::CorruptArchive(format!(
                    "tensor `{}` has inconsistent extent",
                    entry.name
                )));
            }
            let start = entry.offset as usize;
            let end = start + entry.len as usize;
            let data = payload
                .get(start..end)
                .ok_or_else(|| corrupt("payload truncated"))?;
            let values: Vec<f64> = data
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            let m = Matrix::from_shape_vec((rows, cols), values).expect("length checked");
            tensors.push((entry.name, m));
            expected_offset = end as u64;
        }
        if expected_offset as usize != payload.len() {
            return Err(corrupt("trailing bytes after payload"));
        }
        Ok(Self {
            metadata: header.metadata,
            tensors,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;
    use serde_json::json;

    fn sample() -> Archive {
        let mut a = Archive::new(json!({"kind": "weights", "step": 3}));
        a.push("w", array![[1.0, -2.5], [f64::MIN_POSITIVE, 1e300]]);
        a.push("b", array![[0.1, 0.2, 0.3]]);
        a
    }

    #[test]
    fn header_fields_and_endianness() {
        let bytes = sample().to_bytes().unwrap();
        assert_eq!(&bytes[..4], b"SVLA");
        assert_eq!(bytes[4..8], 1u32.to_le_bytes());
        let manifest = sample().manifest();
        assert_eq!(manifest[1].offset, 32);
        assert_eq!(manifest[1].shape, vec![1, 3]);
        // last 8 bytes are 0.3 in little-endian
        assert_eq!(bytes[bytes.len() - 8..], 0.3f64.to_le_bytes());
    }

    #[test]
    fn version_and_corruption_are_rejected() {
        let mut bytes = sample().to_bytes().unwrap();
        bytes[4] = 9;
        assert!(matches!(
            Archive::from_bytes(&bytes),
            Err(Error::VersionMismatch { found: 9, .. })
        ));
        let mut bytes = sample().to_bytes().unwrap();
        bytes.pop();
        assert!(matches!(
            Archive::from_bytes(&bytes),
            Err(Error::CorruptArchive(_))
        ));
        assert!(matches!(
            Archive::from_bytes(b"nope"),
            Err(Error::CorruptArchive(_))
        ));
    }

    proptest! {
        #[test]
        fn round_trip_is_lossless(values in proptest::collection::vec(any::<f64>(), 1..40), cols in 1usize..5) {
            let rows = values.len() / cols;
            prop_assume!(rows > 0);
            let m = Matrix::from_shape_vec((rows, cols), values[..rows * cols].to_vec()).unwrap();
            let mut a = Archive::new(json!({"x": 1}));
            a.push("m", m);
            let bytes = a.to_bytes().unwrap();
            let back = Archive::from_bytes(&bytes).unwrap();
            prop_assert_eq!(back.to_bytes().unwrap(), bytes);
        }
    }
}
