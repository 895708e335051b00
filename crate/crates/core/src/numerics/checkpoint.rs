//! Versioned binary container for tensors and training state.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    8 bytes  "MCGATECK"
//! version  u32
//! count    u32
//! entries  count × { name_len u32, name utf-8, dtype u8, ndim u32,
//!                    dims u64 × ndim, offset u64, nbytes u64 }
//! payload  raw little-endian values; offsets are relative to its start
//! ```

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use thiserror::Error;

use super::element::{DType, Element};
use super::param::Param;
use super::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"MCGATECK";
pub const FORMAT_VERSION: u32 = 1;

const CODE_F32: u8 = 0;
const CODE_F64: u8 = 1;
const CODE_U64: u8 = 2;
const CODE_BYTES: u8 = 3;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),
    #[error("checkpoint truncated or corrupt: {0}")]
    Corrupt(String),
    #[error("checkpoint has no entry `{0}`")]
    Missing(String),
    #[error("entry `{name}`: expected {expected}, found {found}")]
    Mismatch {
        name: String,
        expected: String,
        found: String,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    F32(Vec<f32>),
    F64(Vec<f64>),
    U64(Vec<u64>),
    Bytes(Vec<u8>),
}

impl Payload {
    fn code(&self) -> u8 {
        match self {
            Payload::F32(_) => CODE_F32,
            Payload::F64(_) => CODE_F64,
            Payload::U64(_) => CODE_U64,
            Payload::Bytes(_) => CODE_BYTES,
        }
    }

    fn len(&self) -> usize {
        match self {
            Payload::F32(v) => v.len(),
            Payload::F64(v) => v.len(),
            Payload::U64(v) => v.len(),
            Payload::Bytes(v) => v.len(),
        }
    }

    fn kind(&self) -> &'static str {
        match self {
            Payload::F32(_) => "f32",
            Payload::F64(_) => "f64",
            Payload::U64(_) => "u64",
            Payload::Bytes(_) => "bytes",
        }
    }

    fn write_to(&self, out: &mut Vec<u8>) {
        match self {
            Payload::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            Payload::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            Payload::U64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            Payload::Bytes(v) => out.extend_from_slice(v),
        }
    }

    fn from_elements<T: Element>(v: &[T]) -> Self {
        match T::DTYPE {
            DType::F32 => Payload::F32(v.iter().map(|x| x.as_f64() as f32).collect()),
            DType::F64 => Payload::F64(v.iter().map(|x| x.as_f64()).collect()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub shape: Vec<usize>,
    pub payload: Payload,
}

/// In-memory checkpoint: an ordered name → entry table.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    entries: BTreeMap<String, Entry>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn insert(&mut self, name: impl Into<String>, shape: Vec<usize>, payload: Payload) {
        self.entries.insert(name.into(), Entry { shape, payload });
    }

    pub fn entry(&self, name: &str) -> Result<&Entry, CheckpointError> {
        self.entries.get(name).ok_or_else(|| CheckpointError::Missing(name.to_string()))
    }

    pub fn put_values<T: Element>(&mut self, name: impl Into<String>, shape: &[usize], values: &[T]) {
        self.insert(name, shape.to_vec(), Payload::from_elements(values));
    }

    pub fn put_tensor<T: Element>(&mut self, name: impl Into<String>, t: &Tensor<T>) {
        self.put_values(name, t.shape(), t.data());
    }

    pub fn put_u64s(&mut self, name: impl Into<String>, values: &[u64]) {
        self.insert(name, vec![values.len()], Payload::U64(values.to_vec()));
    }

    pub fn put_f64s(&mut self, name: impl Into<String>, values: &[f64]) {
        self.insert(name, vec![values.len()], Payload::F64(values.to_vec()));
    }

    pub fn put_bytes(&mut self, name: impl Into<String>, bytes: &[u8]) {
        self.insert(name, vec![bytes.len()], Payload::Bytes(bytes.to_vec()));
    }

    /// Values of a float entry converted to `T`. The stored dtype must match
    /// `T` so that resumed training is bit-exact.
    pub fn values<T: Element>(&self, name: &str, shape: &[usize]) -> Result<Vec<T>, CheckpointError> {
        let e = self.entry(name)?;
        if e.shape != shape {
            return Err(CheckpointError::Mismatch {
                name: name.to_string(),
                expected: format!("shape {shape:?}"),
                found: format!("shape {:?}", e.shape),
            });
        }
        match (&e.payload, T::DTYPE) {
            (Payload::F32(v), DType::F32) => Ok(v.iter().map(|&x| T::from_f64(x as f64)).collect()),
            (Payload::F64(v), DType::F64) => Ok(v.iter().map(|&x| T::from_f64(x)).collect()),
            (p, d) => Err(CheckpointError::Mismatch {
                name: name.to_string(),
                expected: format!("{d:?}"),
                found: p.kind().to_string(),
            }),
        }
    }

    pub fn u64s(&self, name: &str) -> Result<&[u64], CheckpointError> {
        match &self.entry(name)?.payload {
            Payload::U64(v) => Ok(v),
            p => Err(CheckpointError::Mismatch {
                name: name.to_string(),
                expected: "u64".into(),
                found: p.kind().into(),
            }),
        }
    }

    pub fn f64s(&self, name: &str) -> Result<&[f64], CheckpointError> {
        match &self.entry(name)?.payload {
            Payload::F64(v) => Ok(v),
            p => Err(CheckpointError::Mismatch {
                name: name.to_string(),
                expected: "f64".into(),
                found: p.kind().into(),
            }),
        }
    }

    pub fn bytes(&self, name: &str) -> Result<&[u8], CheckpointError> {
        match &self.entry(name)?.payload {
            Payload::Bytes(v) => Ok(v),
            p => Err(CheckpointError::Mismatch {
                name: name.to_string(),
                expected: "bytes".into(),
                found: p.kind().into(),
            }),
        }
    }

    /// Stores every param (trainable or buffer) under its own name.
    pub fn put_params<T: Element>(&mut self, params: &[Param<T>]) {
        for p in params {
            self.put_tensor(p.name(), &p.get());
        }
    }

    /// Restores every param from entries with matching names and shapes.
    pub fn load_params<T: Element>(&self, params: &[Param<T>]) -> Result<(), CheckpointError> {
        for p in params {
            p.set_data(self.values(p.name(), &p.shape())?);
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut header = Vec::new();
        header.extend_from_slice(MAGIC);
        header.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        header.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        let mut payload = Vec::new();
        for (name, e) in &self.entries {
            let offset = payload.len() as u64;
            e.payload.write_to(&mut payload);
            let nbytes = payload.len() as u64 - offset;
            header.extend_from_slice(&(name.len() as u32).to_le_bytes());
            header.extend_from_slice(name.as_bytes());
            header.push(e.payload.code());
            header.extend_from_slice(&(e.shape.len() as u32).to_le_bytes());
            for &d in &e.shape {
                header.extend_from_slice(&(d as u64).to_le_bytes());
            }
            header.extend_from_slice(&offset.to_le_bytes());
            header.extend_from_slice(&nbytes.to_le_bytes());
        }
        header.extend_from_slice(&payload);
        header
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut cur = Cursor { bytes, pos: 0 };
        if cur.take(8)? != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = cur.u32()?;
        if version != FORMAT_VERSION {
            return Err(CheckpointError::UnsupportedVersion(version));
        }
        let count = cur.u32()? as usize;
        let mut table = Vec::with_capacity(count);
        for _ in 0..count {
            let len = cur.u32()? as usize;
            let name = String::from_utf8(cur.take(len)?.to_vec())
                .map_err(|_| CheckpointError::Corrupt("entry name is not utf-8".into()))?;
            let code = cur.take(1)?[0];
            let ndim = cur.u32()? as usize;
            let shape = (0..ndim).map(|_| cur.u64().map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
            let offset = cur.u64()? as usize;
            let nbytes = cur.u64()? as usize;
            table.push((name, code, shape, offset, nbytes));
        }
        let payload = &bytes[cur.pos..];
        let mut entries = BTreeMap::new();
        for (name, code, shape, offset, nbytes) in table {
            let raw = payload
                .get(offset..offset + nbytes)
                .ok_or_else(|| CheckpointError::Corrupt(format!("payload of `{name}` out of range")))?;
            let p = match code {
                CODE_F32 => Payload::F32(raw.chunks_exact(4).map(f32::read_le).collect()),
                CODE_F64 => Payload::F64(raw.chunks_exact(8).map(f64::read_le).collect()),
                CODE_U64 => Payload::U64(raw.chunks_exact(8).map(|c| u64::from_le_bytes(c.try_into().unwrap())).collect()),
                CODE_BYTES => Payload::Bytes(raw.to_vec()),
                c => return Err(CheckpointError::Corrupt(format!("unknown dtype code {c} for `{name}`"))),
            };
            let expected: usize = shape.iter().product();
            if p.len() != expected {
                return Err(CheckpointError::Corrupt(format!("`{name}`: {} values for shape {shape:?}", p.len())));
            }
            entries.insert(name, Entry { shape, payload: p });
        }
        Ok(Self { entries })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        let tmp = path.with_extension("tmp");
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(&self.to_bytes())?;
        f.sync_all()?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let mut buf = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut buf)?;
        Self::from_bytes(&buf)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let s = self
            .bytes
            .get(self.pos..self.pos + n)
            .ok_or_else(|| CheckpointError::Corrupt(format!("unexpected end at byte {}", self.pos)))?;
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}
