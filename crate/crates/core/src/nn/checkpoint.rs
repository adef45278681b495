//! Versioned checkpoint container shared by the codec, diffusion and
//! anticipation models.
//!
//! Layout (little-endian):
//! `"EQCK"`, version byte, kind (u8 length + utf-8), header (u32 length +
//! JSON), tensor count (u32), then per tensor: name (u16 length + utf-8),
//! rank (u8), dims (u32 each), `f32` data.

use std::io::{Read, Write};
use std::path::Path;

use serde_json::Value;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"EQCK";
pub const VERSION: u8 = 1;

pub type NamedTensor = (String, Vec<usize>, Vec<f32>);

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub kind: String,
    pub header: Value,
    pub tensors: Vec<NamedTensor>,
}

impl Checkpoint {
    pub fn new(kind: impl Into<String>, header: Value, tensors: Vec<NamedTensor>) -> Self {
        Self {
            kind: kind.into(),
            header,
            tensors,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        let kind = self.kind.as_bytes();
        out.push(u8::try_from(kind.len()).map_err(|_| Error::Checkpoint("kind too long".into()))?);
        out.extend_from_slice(kind);
        let header = serde_json::to_vec(&self.header)?;
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, dims, data) in &self.tensors {
            if dims.iter().product::<usize>() != data.len() {
                return Err(Error::Checkpoint(format!("tensor {name}: dims {dims:?} vs {} values", data.len())));
            }
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(dims.len() as u8);
            for d in dims {
                out.extend_from_slice(&(*d as u32).to_le_bytes());
            }
            for v in data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut magic = [0u8; 4];
        read_exact(&mut r, &mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = read_u8(&mut r)?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let klen = read_u8(&mut r)? as usize;
        let kind = read_string(&mut r, klen)?;
        let hlen = read_u32(&mut r)? as usize;
        let mut hbuf = vec![0u8; hlen];
        read_exact(&mut r, &mut hbuf)?;
        let header: Value = serde_json::from_slice(&hbuf)?;
        let count = read_u32(&mut r)? as usize;
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let nlen = read_u16(&mut r)? as usize;
            let name = read_string(&mut r, nlen)?;
            let rank = read_u8(&mut r)? as usize;
            let dims = (0..rank)
                .map(|_| read_u32(&mut r).map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let n: usize = dims.iter().product();
            let mut data = Vec::with_capacity(n);
            for _ in 0..n {
                let mut b = [0u8; 4];
                read_exact(&mut r, &mut b)?;
                data.push(f32::from_le_bytes(b));
            }
            tensors.push((name, dims, data));
        }
        if !r.is_empty() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", r.len())));
        }
        Ok(Self { kind, header, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut buf = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut buf))
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&buf)
    }

    pub fn expect_kind(self, kind: &str) -> Result<Self> {
        if self.kind != kind {
            return Err(Error::Checkpoint(format!("expected a {kind} checkpoint, found {}", self.kind)));
        }
        Ok(self)
    }

    /// Tensors whose name starts with `prefix`, with the prefix stripped.
    pub fn section(&self, prefix: &str) -> Vec<NamedTensor> {
        self.tensors
            .iter()
            .filter_map(|(n, d, v)| n.strip_prefix(prefix).map(|s| (s.to_string(), d.clone(), v.clone())))
            .collect()
    }
}

fn read_exact(r: &mut &[u8], buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|_| Error::Checkpoint("truncated checkpoint".into()))
}

fn read_u8(r: &mut &[u8]) -> Result<u8> {
    let mut b = [0u8; 1];
    read_exact(r, &mut b)?;
    Ok(b[0])
}

fn read_u16(r: &mut &[u8]) -> Result<u16> {
    let mut b = [0u8; 2];
    read_exact(r, &mut b)?;
    Ok(u16::from_le_bytes(b))
}

fn read_u32(r: &mut &[u8]) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_string(r: &mut &[u8], len: usize) -> Result<String> {
    let mut b = vec![0u8; len];
    read_exact(r, &mut b)?;
    String::from_utf8(b).map_err(|_| Error::Checkpoint("non-utf8 name".into()))
}
