//! The flat binary container shared by checkpoints and dataset exports.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "FVL1"  u32 version  u64 doc_len  doc (UTF-8 JSON)
//! u64 entry_count
//! per entry: u32 name_len  name  u8 dtype  u32 rank  rank × u64 dims  payload
//! ```
//!
//! Payloads are raw `f64` (dtype 0) or `i64` (dtype 1) values.

use std::io::{Read, Write};

use thiserror::Error;

use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"FVL1";
pub const VERSION: u32 = 1;

const DTYPE_F64: u8 = 0;
const DTYPE_I64: u8 = 1;
// Guards against absurd allocations when reading a damaged file.
const MAX_ELEMENTS: u64 = 1 << 32;

#[derive(Debug, Error)]
pub enum ContainerError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("not an FVL1 container (bad magic bytes {0:?}); expected format version {VERSION}")]
    BadMagic([u8; 4]),
    #[error("unsupported container format version {found}; this build reads version {VERSION}")]
    Version { found: u32 },
    #[error("document is not valid UTF-8 JSON: {0}")]
    Doc(#[from] serde_json::Error),
    #[error("entry `{name}` has unknown dtype tag {tag}")]
    Dtype { name: String, tag: u8 },
    #[error("entry name is not valid UTF-8")]
    Name,
    #[error("entry `{0}` is implausibly large")]
    TooLarge(String),
    #[error("entry `{0}` is missing")]
    Missing(String),
    #[error("entry `{name}` has the wrong type or shape: {detail}")]
    Mismatch { name: String, detail: String },
}

pub type Result<T, E = ContainerError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    F64(Tensor),
    I64 { shape: Vec<usize>, data: Vec<i64> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub name: String,
    pub payload: Payload,
}

/// A parsed container: the JSON document plus ordered entries.
#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub doc: serde_json::Value,
    pub entries: Vec<Entry>,
}

impl Container {
    pub fn new(doc: serde_json::Value) -> Self {
        Self {
            doc,
            entries: Vec::new(),
        }
    }

    pub fn push_f64(&mut self, name: impl Into<String>, t: Tensor) {
        self.entries.push(Entry {
            name: name.into(),
            payload: Payload::F64(t),
        });
    }

    pub fn push_i64(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<i64>) {
        self.entries.push(Entry {
            name: name.into(),
            payload: Payload::I64 { shape, data },
        });
    }

    pub fn get(&self, name: &str) -> Result<&Payload> {
        self.entries
            .iter()
            .find(|e| e.name == name)
            .map(|e| &e.payload)
            .ok_or_else(|| ContainerError::Missing(name.to_string()))
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        match self.get(name)? {
            Payload::F64(t) => Ok(t),
            Payload::I64 { .. } => Err(ContainerError::Mismatch {
                name: name.to_string(),
                detail: "expected f64 payload".into(),
            }),
        }
    }

    pub fn ints(&self, name: &str) -> Result<&[i64]> {
        match self.get(name)? {
            Payload::I64 { data, .. } => Ok(data),
            Payload::F64(_) => Err(ContainerError::Mismatch {
                name: name.to_string(),
                detail: "expected i64 payload".into(),
            }),
        }
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        let doc = serde_json::to_vec(&self.doc)?;
        w.write_all(&(doc.len() as u64).to_le_bytes())?;
        w.write_all(&doc)?;
        w.write_all(&(self.entries.len() as u64).to_le_bytes())?;
        for e in &self.entries {
            w.write_all(&(e.name.len() as u32).to_le_bytes())?;
            w.write_all(e.name.as_bytes())?;
            let (tag, shape) = match &e.payload {
                Payload::F64(t) => (DTYPE_F64, t.shape()),
                Payload::I64 { shape, .. } => (DTYPE_I64, shape.as_slice()),
            };
            w.write_all(&[tag])?;
            w.write_all(&(shape.len() as u32).to_le_bytes())?;
            for &d in shape {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            match &e.payload {
                Payload::F64(t) => {
                    for v in t.data() {
                        w.write_all(&v.to_le_bytes())?;
                    }
                }
                Payload::I64 { data, .. } => {
                    for v in data {
                        w.write_all(&v.to_le_bytes())?;
                    }
                }
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_to(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(ContainerError::BadMagic(magic));
        }
        let version = read_u32(r)?;
        if version != VERSION {
            return Err(ContainerError::Version { found: version });
        }
        let doc_len = read_u64(r)?;
        if doc_len > MAX_ELEMENTS {
            return Err(ContainerError::TooLarge("document".into()));
        }
        let mut doc = vec![0u8; doc_len as usize];
        r.read_exact(&mut doc)?;
        let doc = serde_json::from_slice(&doc)?;
        let count = read_u64(r)?;
        let mut entries = Vec::new();
        for _ in 0..count {
            let name_len = read_u32(r)? as usize;
            let mut name = vec![0u8; name_len];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name).map_err(|_| ContainerError::Name)?;
            let mut tag = [0u8; 1];
            r.read_exact(&mut tag)?;
            let rank = read_u32(r)?;
            let mut shape = Vec::with_capacity(rank as usize);
            let mut n: u64 = 1;
            for _ in 0..rank {
                let d = read_u64(r)?;
                n = n.saturating_mul(d);
                shape.push(d as usize);
            }
            if n > MAX_ELEMENTS {
                return Err(ContainerError::TooLarge(name));
            }
            let mut buf = vec![0u8; n as usize * 8];
            r.read_exact(&mut buf)?;
            let words = buf.chunks_exact(8).map(|c| <[u8; 8]>::try_from(c).expect("chunk of 8"));
            let payload = match tag[0] {
                DTYPE_F64 => {
                    let data = words.map(f64::from_le_bytes).collect();
                    let t = Tensor::new(shape, data).map_err(|e| ContainerError::Mismatch {
                        name: name.clone(),
                        detail: e.to_string(),
                    })?;
                    Payload::F64(t)
                }
                DTYPE_I64 => Payload::I64 {
                    shape,
                    data: words.map(i64::from_le_bytes).collect(),
                },
                tag => return Err(ContainerError::Dtype { name, tag }),
            };
            entries.push(Entry { name, payload });
        }
        Ok(Self { doc, entries })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        Self::read_from(&mut f)
    }
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}
