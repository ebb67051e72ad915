//! Binary container shared by every on-disk artifact (dataset dumps,
//! embedding dumps, alignment state, checkpoints, graph vectors).
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic   b"GVEC"
//! version u32
//! hlen    u64            length of the JSON header in bytes
//! header  [u8; hlen]     {"kind", "meta", "blocks": [{name, dtype, shape, offset}]}
//! payload                blocks back to back, row-major, f64 or i32
//! ```
//!
//! `offset` is relative to the start of the payload.

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"GVEC";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F64,
    I32,
}

impl DType {
    fn width(self) -> usize {
        match self {
            DType::F64 => 8,
            DType::I32 => 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum BlockData {
    F64(Vec<f64>),
    I32(Vec<i32>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub name: String,
    pub shape: [usize; 2],
    pub data: BlockData,
}

#[derive(Serialize, Deserialize)]
struct BlockEntry {
    name: String,
    dtype: DType,
    shape: [usize; 2],
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    kind: String,
    meta: serde_json::Value,
    blocks: Vec<BlockEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub kind: String,
    pub meta: serde_json::Value,
    pub blocks: Vec<Block>,
}

impl Container {
    pub fn new<M: Serialize>(kind: &str, meta: &M) -> Result<Self> {
        Ok(Container {
            kind: kind.to_string(),
            meta: serde_json::to_value(meta)?,
            blocks: Vec::new(),
        })
    }

    pub fn meta<M: for<'de> Deserialize<'de>>(&self) -> Result<M> {
        Ok(serde_json::from_value(self.meta.clone())?)
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind != kind {
            return Err(Error::Format(format!(
                "expected a `{kind}` container, found `{}`",
                self.kind
            )));
        }
        Ok(())
    }

    pub fn push_matrix(&mut self, name: impl Into<String>, m: &Array2<f64>) {
        let shape = [m.nrows(), m.ncols()];
        self.blocks.push(Block {
            name: name.into(),
            shape,
            data: BlockData::F64(m.iter().copied().collect()),
        });
    }

    pub fn push_vector(&mut self, name: impl Into<String>, v: &[f64]) {
        self.blocks.push(Block {
            name: name.into(),
            shape: [1, v.len()],
            data: BlockData::F64(v.to_vec()),
        });
    }

    pub fn push_i32(&mut self, name: impl Into<String>, rows: usize, cols: usize, v: Vec<i32>) {
        debug_assert_eq!(rows * cols, v.len());
        self.blocks.push(Block {
            name: name.into(),
            shape: [rows, cols],
            data: BlockData::I32(v),
        });
    }

    fn block(&self, name: &str) -> Result<&Block> {
        self.blocks
            .iter()
            .find(|b| b.name == name)
            .ok_or_else(|| Error::Format(format!("missing block `{name}`")))
    }

    pub fn matrix(&self, name: &str) -> Result<Array2<f64>> {
        let b = self.block(name)?;
        match &b.data {
            BlockData::F64(v) => Array2::from_shape_vec((b.shape[0], b.shape[1]), v.clone())
                .map_err(|e| Error::Format(format!("block `{name}`: {e}"))),
            BlockData::I32(_) => Err(Error::Format(format!("block `{name}` is not f64"))),
        }
    }

    pub fn vector(&self, name: &str) -> Result<Array1<f64>> {
        Ok(Array1::from_iter(self.matrix(name)?))
    }

    pub fn i32s(&self, name: &str) -> Result<(usize, usize, Vec<i32>)> {
        let b = self.block(name)?;
        match &b.data {
            BlockData::I32(v) => Ok((b.shape[0], b.shape[1], v.clone())),
            BlockData::F64(_) => Err(Error::Format(format!("block `{name}` is not i32"))),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut entries = Vec::with_capacity(self.blocks.len());
        let mut offset = 0usize;
        for b in &self.blocks {
            let dtype = match b.data {
                BlockData::F64(_) => DType::F64,
                BlockData::I32(_) => DType::I32,
            };
            entries.push(BlockEntry {
                name: b.name.clone(),
                dtype,
                shape: b.shape,
                offset,
            });
            offset += b.shape[0] * b.shape[1] * dtype.width();
        }
        let header = serde_json::to_vec(&Header {
            kind: self.kind.clone(),
            meta: self.meta.clone(),
            blocks: entries,
        })?;
        let mut out = Vec::with_capacity(16 + header.len() + offset);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for b in &self.blocks {
            match &b.data {
                BlockData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                BlockData::I32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..4] != MAGIC {
            return Err(Error::Format("bad magic".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let payload_start = 16usize
            .checked_add(hlen)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| Error::Format("truncated header".into()))?;
        let header: Header = serde_json::from_slice(&bytes[16..payload_start])?;
        let payload = &bytes[payload_start..];
        let mut blocks = Vec::with_capacity(header.blocks.len());
        for e in header.blocks {
            let count = e.shape[0] * e.shape[1];
            let end = e.offset + count * e.dtype.width();
            let raw = payload
                .get(e.offset..end)
                .ok_or_else(|| Error::Format(format!("block `{}` out of bounds", e.name)))?;
            let data = match e.dtype {
                DType::F64 => BlockData::F64(
                    raw.chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                ),
                DType::I32 => BlockData::I32(
                    raw.chunks_exact(4)
                        .map(|c| i32::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                ),
            };
            blocks.push(Block {
                name: e.name,
                shape: e.shape,
                data,
            });
        }
        Ok(Container {
            kind: header.kind,
            meta: header.meta,
            blocks,
        })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}
