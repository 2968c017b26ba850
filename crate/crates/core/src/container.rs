//! Self-describing tensor container used for model checkpoints and
//! quantized model files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! offset  size  field
//! 0       4     magic "CMDL"
//! 4       2     format version (currently 1)
//! 6       2     reserved, zero
//! 8       8     header length H
//! 16      H     JSON header: kind, metadata, tensor directory, provenance
//! 16+H    ...   tensor payload, row-major, in directory order
//! ```
//!
//! The header's tensor directory gives each tensor's name, dtype, shape and
//! byte range inside the payload. Writing is deterministic: identical
//! contents produce identical bytes.

use std::fs;
use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub const MAGIC: [u8; 4] = *b"CMDL";
pub const FORMAT_VERSION: u16 = 1;

#[derive(Debug, Error)]
pub enum ContainerError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("bad magic, not a model container")]
    BadMagic,
    #[error("unsupported container version {0}")]
    BadVersion(u16),
    #[error("truncated container ({0})")]
    Truncated(&'static str),
    #[error("malformed header json: {0}")]
    Header(#[from] serde_json::Error),
    #[error("tensor {name}: directory len {expected} bytes, payload has {found}")]
    TensorBounds { name: String, expected: u64, found: u64 },
    #[error("tensor {name}: shape {shape:?} does not match {len} elements")]
    ShapeMismatch { name: String, shape: Vec<usize>, len: usize },
    #[error("missing tensor {0}")]
    MissingTensor(String),
    #[error("tensor {name} has dtype {found}, expected {expected}")]
    DtypeMismatch { name: String, expected: &'static str, found: String },
    #[error("container kind {found:?}, expected {expected:?}")]
    KindMismatch { expected: String, found: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    I8,
    I32,
}

impl Dtype {
    fn size(self) -> usize {
        match self {
            Dtype::F32 | Dtype::I32 => 4,
            Dtype::I8 => 1,
        }
    }

    fn name(self) -> &'static str {
        match self {
            Dtype::F32 => "f32",
            Dtype::I8 => "i8",
            Dtype::I32 => "i32",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    I8(Vec<i8>),
    I32(Vec<i32>),
}

impl TensorData {
    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::I8(v) => v.len(),
            TensorData::I32(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn dtype(&self) -> Dtype {
        match self {
            TensorData::F32(_) => Dtype::F32,
            TensorData::I8(_) => Dtype::I8,
            TensorData::I32(_) => Dtype::I32,
        }
    }

    fn write_le(&self, out: &mut Vec<u8>) {
        match self {
            TensorData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::I8(v) => v.iter().for_each(|x| out.push(*x as u8)),
            TensorData::I32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
    }

    fn read_le(dtype: Dtype, bytes: &[u8]) -> Self {
        match dtype {
            Dtype::F32 => TensorData::F32(
                bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect(),
            ),
            Dtype::I8 => TensorData::I8(bytes.iter().map(|&b| b as i8).collect()),
            Dtype::I32 => TensorData::I32(
                bytes.chunks_exact(4).map(|c| i32::from_le_bytes(c.try_into().unwrap())).collect(),
            ),
        }
    }
}

/// One named row-major tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: TensorData,
}

impl Tensor {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, data: TensorData) -> Self {
        Self { name: name.into(), shape, data }
    }
}

/// Where an artifact came from: resolved configuration and input digests.
/// File paths are reduced to names so artifacts are position independent.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub tool: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub resolved_config: Option<String>,
    #[serde(default)]
    pub inputs: Vec<InputDigest>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_model_sha256: Option<String>,
}

impl Provenance {
    pub fn tool() -> Self {
        Self {
            tool: format!("canids {}", env!("CARGO_PKG_VERSION")),
            ..Self::default()
        }
    }

    pub fn push_input(&mut self, path: &Path, sha256: String) {
        let name = path
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| path.display().to_string());
        self.inputs.push(InputDigest { name, sha256 });
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputDigest {
    pub name: String,
    pub sha256: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    dtype: Dtype,
    shape: Vec<usize>,
    offset: u64,
    len_bytes: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    kind: String,
    meta: serde_json::Value,
    tensors: Vec<TensorEntry>,
    provenance: Provenance,
}

/// In-memory model container.
#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub kind: String,
    pub meta: serde_json::Value,
    pub tensors: Vec<Tensor>,
    pub provenance: Provenance,
}

impl Container {
    pub fn new(kind: impl Into<String>, meta: serde_json::Value, provenance: Provenance) -> Self {
        Self { kind: kind.into(), meta, tensors: Vec::new(), provenance }
    }

    pub fn push(&mut self, tensor: Tensor) {
        self.tensors.push(tensor);
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor, ContainerError> {
        self.tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| ContainerError::MissingTensor(name.to_string()))
    }

    pub fn f32_tensor(&self, name: &str) -> Result<(&[usize], &[f32]), ContainerError> {
        let t = self.tensor(name)?;
        match &t.data {
            TensorData::F32(v) => Ok((&t.shape, v)),
            other => Err(ContainerError::DtypeMismatch {
                name: name.to_string(),
                expected: "f32",
                found: other.dtype().name().to_string(),
            }),
        }
    }

    pub fn i8_tensor(&self, name: &str) -> Result<(&[usize], &[i8]), ContainerError> {
        let t = self.tensor(name)?;
        match &t.data {
            TensorData::I8(v) => Ok((&t.shape, v)),
            other => Err(ContainerError::DtypeMismatch {
                name: name.to_string(),
                expected: "i8",
                found: other.dtype().name().to_string(),
            }),
        }
    }

    pub fn i32_tensor(&self, name: &str) -> Result<(&[usize], &[i32]), ContainerError> {
        let t = self.tensor(name)?;
        match &t.data {
            TensorData::I32(v) => Ok((&t.shape, v)),
            other => Err(ContainerError::DtypeMismatch {
                name: name.to_string(),
                expected: "i32",
                found: other.dtype().name().to_string(),
            }),
        }
    }

    pub fn expect_kind(&self, kind: &str) -> Result<(), ContainerError> {
        if self.kind != kind {
            return Err(ContainerError::KindMismatch {
                expected: kind.to_string(),
                found: self.kind.clone(),
            });
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, ContainerError> {
        let mut payload = Vec::new();
        let mut entries = Vec::with_capacity(self.tensors.len());
        for t in &self.tensors {
            let elems: usize = t.shape.iter().product();
            if elems != t.data.len() {
                return Err(ContainerError::ShapeMismatch {
                    name: t.name.clone(),
                    shape: t.shape.clone(),
                    len: t.data.len(),
                });
            }
            let offset = payload.len() as u64;
            t.data.write_le(&mut payload);
            entries.push(TensorEntry {
                name: t.name.clone(),
                dtype: t.data.dtype(),
                shape: t.shape.clone(),
                offset,
                len_bytes: payload.len() as u64 - offset,
            });
        }
        let header = Header {
            kind: self.kind.clone(),
            meta: self.meta.clone(),
            tensors: entries,
            provenance: self.provenance.clone(),
        };
        let header_json = serde_json::to_vec(&header)?;

        let mut out = Vec::with_capacity(16 + header_json.len() + payload.len());
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&[0u8; 2]);
        out.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
        out.extend_from_slice(&header_json);
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ContainerError> {
        if bytes.len() < 16 {
            return Err(ContainerError::Truncated("preamble"));
        }
        if bytes[0..4] != MAGIC {
            return Err(ContainerError::BadMagic);
        }
        let version = u16::from_le_bytes(bytes[4..6].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(ContainerError::BadVersion(version));
        }
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let header_end = 16usize.checked_add(header_len).ok_or(ContainerError::Truncated("header"))?;
        if bytes.len() < header_end {
            return Err(ContainerError::Truncated("header"));
        }
        let header: Header = serde_json::from_slice(&bytes[16..header_end])?;
        let payload = &bytes[header_end..];

        let mut tensors = Vec::with_capacity(header.tensors.len());
        for e in header.tensors {
            let start = e.offset as usize;
            let end = start
                .checked_add(e.len_bytes as usize)
                .ok_or(ContainerError::Truncated("tensor payload"))?;
            if end > payload.len() {
                return Err(ContainerError::TensorBounds {
                    name: e.name,
                    expected: e.len_bytes,
                    found: payload.len() as u64,
                });
            }
            let elems: usize = e.shape.iter().product();
            if elems * e.dtype.size() != e.len_bytes as usize {
                return Err(ContainerError::ShapeMismatch {
                    name: e.name,
                    shape: e.shape,
                    len: e.len_bytes as usize / e.dtype.size(),
                });
            }
            let data = TensorData::read_le(e.dtype, &payload[start..end]);
            tensors.push(Tensor { name: e.name, shape: e.shape, data });
        }
        Ok(Self { kind: header.kind, meta: header.meta, tensors, provenance: header.provenance })
    }

    pub fn write_file(&self, path: &Path) -> Result<(), ContainerError> {
        Ok(fs::write(path, self.to_bytes()?)?)
    }

    pub fn read_file(path: &Path) -> Result<Self, ContainerError> {
        Self::from_bytes(&fs::read(path)?)
    }
}

/// Hex SHA-256 of a byte string.
pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let digest = hasher.finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Hex SHA-256 of a file's contents.
pub fn sha256_file(path: &Path) -> io::Result<String> {
    Ok(sha256_hex(&fs::read(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Container {
        let mut c = Container::new(
            "mlp-float",
            serde_json::json!({"layer_units": [2, 1]}),
            Provenance::tool(),
        );
        c.push(Tensor::new("w", vec![1, 2], TensorData::F32(vec![0.5, -1.25])));
        c.push(Tensor::new("b", vec![1], TensorData::I32(vec![-7])));
        c.push(Tensor::new("q", vec![4], TensorData::I8(vec![-128, -1, 0, 127])));
        c
    }

    #[test]
    fn round_trips() {
        let c = sample();
        let bytes = c.to_bytes().unwrap();
        let back = Container::from_bytes(&bytes).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn serialization_is_deterministic() {
        assert_eq!(sample().to_bytes().unwrap(), sample().to_bytes().unwrap());
    }

    #[test]
    fn rejects_bad_magic() {
        let mut bytes = sample().to_bytes().unwrap();
        bytes[0] = b'X';
        assert!(matches!(Container::from_bytes(&bytes), Err(ContainerError::BadMagic)));
    }

    #[test]
    fn rejects_truncation() {
        let bytes = sample().to_bytes().unwrap();
        assert!(Container::from_bytes(&bytes[..bytes.len() - 3]).is_err());
    }

    #[test]
    fn rejects_shape_mismatch_on_write() {
        let mut c = sample();
        c.tensors[0].shape = vec![3, 3];
        assert!(matches!(c.to_bytes(), Err(ContainerError::ShapeMismatch { .. })));
    }

    #[test]
    fn sha256_known_vector() {
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }
}
