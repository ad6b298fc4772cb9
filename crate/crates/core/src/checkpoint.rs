//! Binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "MLRA" | version: u16 | header_len: u32 | header: UTF-8 JSON
//! tensor_count: u32
//! repeated: name_len: u32 | name: UTF-8 | rows: u32 | cols: u32 | rows*cols f64
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Matrix;

pub const MAGIC: &[u8; 4] = b"MLRA";
pub const FORMAT_VERSION: u16 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointKind {
    /// Frozen base weights.
    Base,
    /// Meta-trained shared down factors only.
    Stage1,
    /// Shared down factors plus one identity's mid/up factors.
    Personalized,
    /// Two-factor export.
    Merged,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub kind: CheckpointKind,
    pub r1: Option<usize>,
    pub r2: Option<usize>,
    pub layers: Vec<String>,
    pub seed: u64,
    pub config_hash: String,
    #[serde(default)]
    pub extra: BTreeMap<String, serde_json::Value>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    tensors: Vec<(String, Matrix)>,
}

impl Checkpoint {
    pub fn new(header: CheckpointHeader) -> Self {
        Checkpoint {
            header,
            tensors: Vec::new(),
        }
    }

    /// Appends a tensor; names must be unique.
    pub fn insert(&mut self, name: impl Into<String>, value: Matrix) -> Result<()> {
        let name = name.into();
        if self.tensors.iter().any(|(n, _)| *n == name) {
            return Err(Error::Invalid(format!("duplicate tensor name {name:?}")));
        }
        self.tensors.push((name, value));
        Ok(())
    }

    pub fn with(mut self, name: impl Into<String>, value: Matrix) -> Result<Self> {
        self.insert(name, value)?;
        Ok(self)
    }

    pub fn tensors(&self) -> &[(String, Matrix)] {
        &self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Matrix> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, m)| m)
    }

    pub fn tensor(&self, name: &str) -> Result<&Matrix> {
        self.get(name)
            .ok_or_else(|| Error::Invalid(format!("checkpoint has no tensor {name:?}")))
    }

    pub fn expect_kind(&self, kind: CheckpointKind) -> Result<()> {
        if self.header.kind != kind {
            return Err(Error::Invalid(format!(
                "expected a {kind:?} checkpoint, found {:?}",
                self.header.kind
            )));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&self.header)?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&len_u32(header.len(), "header")?.to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&len_u32(self.tensors.len(), "tensor count")?.to_le_bytes());
        for (name, m) in &self.tensors {
            out.extend_from_slice(&len_u32(name.len(), "name")?.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&len_u32(m.rows(), "rows")?.to_le_bytes());
            out.extend_from_slice(&len_u32(m.cols(), "cols")?.to_le_bytes());
            for v in m.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        let magic = r.take(4, "magic")?;
        if magic != MAGIC {
            return Err(Error::Parse {
                offset: 0,
                reason: format!("bad magic {magic:?}"),
            });
        }
        let version_at = r.pos;
        let version = r.u16("format version")?;
        if version != FORMAT_VERSION {
            return Err(Error::Parse {
                offset: version_at,
                reason: format!("unsupported format version {version} (expected {FORMAT_VERSION})"),
            });
        }
        let header_len = r.u32("header length")? as usize;
        let header_at = r.pos;
        let header_bytes = r.take(header_len, "header")?;
        let header: CheckpointHeader = serde_json::from_slice(header_bytes).map_err(|e| Error::Parse {
            offset: header_at,
            reason: format!("invalid header JSON: {e}"),
        })?;
        let count = r.u32("tensor count")? as usize;
        let mut ckpt = Checkpoint::new(header);
        for i in 0..count {
            let name_len = r.u32("tensor name length")? as usize;
            let name_at = r.pos;
            let name_bytes = r.take(name_len, "tensor name")?;
            let name = std::str::from_utf8(name_bytes)
                .map_err(|_| Error::Parse {
                    offset: name_at,
                    reason: format!("tensor {i} name is not UTF-8"),
                })?
                .to_string();
            let rows = r.u32("rows")? as usize;
            let cols = r.u32("cols")? as usize;
            let n = rows.checked_mul(cols).and_then(|n| n.checked_mul(8)).ok_or(Error::Parse {
                offset: r.pos,
                reason: format!("tensor {name:?} shape {rows}x{cols} overflows"),
            })?;
            let payload = r.take(n, "tensor payload")?;
            let data = payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            if ckpt.get(&name).is_some() {
                return Err(Error::Parse {
                    offset: name_at,
                    reason: format!("duplicate tensor name {name:?}"),
                });
            }
            ckpt.tensors.push((name, Matrix::from_vec(rows, cols, data)?));
        }
        if r.pos != bytes.len() {
            return Err(Error::Parse {
                offset: r.pos,
                reason: format!("{} trailing bytes", bytes.len() - r.pos),
            });
        }
        Ok(ckpt)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

fn len_u32(n: usize, what: &str) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::Invalid(format!("{what} {n} does not fit in u32")))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let remaining = self.buf.len() - self.pos;
        if n > remaining {
            return Err(Error::Parse {
                offset: self.pos,
                reason: format!("truncated {what}: need {n} bytes, {remaining} remain"),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
}
