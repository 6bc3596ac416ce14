//! `MPCK` checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "MPCK" | u32 version | u32 meta_len | meta_len bytes of JSON metadata
//! u32 entry_count | entry*
//! entry = u32 name_len | name (UTF-8) | u8 dtype (0 = f32) | u32 rank
//!         | rank x u64 extents | prod(extents) x f32 payload
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::grad::{ParamStore, Tensor};

pub const MAGIC: &[u8; 4] = b"MPCK";
pub const FORMAT_VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum CheckpointError {
    #[error("{path}: {msg}")]
    Io { path: PathBuf, msg: String },
    #[error("not an MPCK checkpoint (magic {found:02x?})")]
    BadMagic { found: Vec<u8> },
    #[error("checkpoint format version {found} is not supported (this build reads version {expected})")]
    Version { found: u32, expected: u32 },
    #[error("checkpoint truncated at byte offset {offset} while reading {what}")]
    Truncated { offset: usize, what: String },
    #[error("corrupt checkpoint at byte offset {offset}: {msg}")]
    Corrupt { offset: usize, msg: String },
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config_hash: String,
    pub seed: u64,
    pub epoch: u64,
    #[serde(default)]
    pub extra: BTreeMap<String, String>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub tensors: ParamStore<f32>,
}

impl Checkpoint {
    pub fn new(meta: CheckpointMeta, tensors: ParamStore<f32>) -> Self {
        Self { meta, tensors }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        let meta = serde_json::to_vec(&self.meta).expect("metadata serialises");
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in self.tensors.iter() {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(DTYPE_F32);
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &e in t.shape() {
                out.extend_from_slice(&(e as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(4, "magic")?;
        if magic != MAGIC {
            return Err(CheckpointError::BadMagic { found: magic.to_vec() });
        }
        let version = r.u32("format version")?;
        if version != FORMAT_VERSION {
            return Err(CheckpointError::Version { found: version, expected: FORMAT_VERSION });
        }
        let meta_len = r.u32("metadata length")? as usize;
        let at = r.pos;
        let meta: CheckpointMeta = serde_json::from_slice(r.take(meta_len, "metadata")?)
            .map_err(|e| CheckpointError::Corrupt { offset: at, msg: format!("metadata: {e}") })?;
        let count = r.u32("entry count")?;
        let mut tensors = ParamStore::new();
        for i in 0..count {
            let at = r.pos;
            let name_len = r.u32(&format!("entry {i} name length"))? as usize;
            let name = std::str::from_utf8(r.take(name_len, &format!("entry {i} name"))?)
                .map_err(|e| CheckpointError::Corrupt { offset: at, msg: format!("entry name: {e}") })?
                .to_string();
            let at = r.pos;
            let dtype = r.take(1, &format!("`{name}` dtype"))?[0];
            if dtype != DTYPE_F32 {
                return Err(CheckpointError::Corrupt { offset: at, msg: format!("`{name}`: unknown dtype tag {dtype}") });
            }
            let rank = r.u32(&format!("`{name}` rank"))? as usize;
            if rank > 8 {
                return Err(CheckpointError::Corrupt { offset: at, msg: format!("`{name}`: rank {rank}") });
            }
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                let at = r.pos;
                let e = r.u64(&format!("`{name}` extents"))?;
                if e == 0 || e > u32::MAX as u64 {
                    return Err(CheckpointError::Corrupt { offset: at, msg: format!("`{name}`: extent {e}") });
                }
                shape.push(e as usize);
            }
            let n: usize = shape.iter().product();
            let payload = r.take(n.checked_mul(4).unwrap_or(usize::MAX), &format!("`{name}` payload"))?;
            let data = payload.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
            let t = Tensor::new(shape, data).map_err(|e| CheckpointError::Corrupt { offset: at, msg: e.to_string() })?;
            if tensors.contains(&name) {
                return Err(CheckpointError::Corrupt { offset: at, msg: format!("duplicate entry `{name}`") });
            }
            tensors.insert(name, t);
        }
        if r.pos != bytes.len() {
            return Err(CheckpointError::Corrupt { offset: r.pos, msg: "trailing bytes after last entry".into() });
        }
        Ok(Self { meta, tensors })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(CheckpointError::Truncated { offset: self.bytes.len(), what: what.to_string() }),
        }
    }

    fn u32(&mut self, what: &str) -> Result<u32, CheckpointError> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self, what: &str) -> Result<u64, CheckpointError> {
        let b = self.take(8, what)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }
}

/// Writes to a sibling temporary file, then renames over `path`.
pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<(), CheckpointError> {
    let io = |e: std::io::Error| CheckpointError::Io { path: path.to_path_buf(), msg: e.to_string() };
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io)?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    {
        let mut f = fs::File::create(&tmp).map_err(io)?;
        f.write_all(&ckpt.to_bytes()).map_err(io)?;
        f.sync_all().map_err(io)?;
    }
    fs::rename(&tmp, path).map_err(io)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, CheckpointError> {
    let bytes = fs::read(path).map_err(|e| CheckpointError::Io { path: path.to_path_buf(), msg: e.to_string() })?;
    Checkpoint::from_bytes(&bytes)
}
