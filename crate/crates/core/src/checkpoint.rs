//! Versioned weight container: magic, version, a JSON header, then named
//! little-endian `f64` tensors.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{io_err, IgclError, Result};
use crate::nn::ParamStore;
use crate::tensor::{numel, Array};

pub const MAGIC: &[u8; 8] = b"IGCLCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointKind {
    /// Every weight set plus optimizer state; enough to resume.
    Training,
    /// Backbone weights only.
    Inference,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub version: u32,
    pub kind: CheckpointKind,
    /// Owner-defined metadata (configuration snapshot, progress counters).
    pub meta: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub store: ParamStore,
    pub momentum: BTreeMap<String, Array>,
}

impl Checkpoint {
    pub fn new(kind: CheckpointKind, meta: serde_json::Value, store: ParamStore) -> Self {
        Self { header: CheckpointHeader { version: FORMAT_VERSION, kind, meta }, store, momentum: BTreeMap::new() }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        let header = serde_json::to_vec(&self.header)?;
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        let entries: Vec<(String, &Array)> = self
            .store
            .params()
            .iter()
            .map(|(k, v)| (format!("param/{k}"), v))
            .chain(self.store.buffers().iter().map(|(k, v)| (format!("buffer/{k}"), v)))
            .chain(self.momentum.iter().map(|(k, v)| (format!("momentum/{k}"), v)))
            .collect();
        out.extend_from_slice(&(entries.len() as u64).to_le_bytes());
        for (name, array) in entries {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(array.ndim() as u32).to_le_bytes());
            for &d in array.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in array.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(io_err(dir))?;
        }
        let mut file = fs::File::create(path).map_err(io_err(path))?;
        file.write_all(&out).map_err(io_err(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        fs::File::open(path).map_err(io_err(path))?.read_to_end(&mut bytes).map_err(io_err(path))?;
        let bad = |reason: &str| IgclError::Checkpoint { path: path.to_path_buf(), reason: reason.to_string() };
        let mut r = Reader { bytes: &bytes, pos: 0 };
        if r.take(8).ok_or_else(|| bad("truncated magic"))? != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let version = r.u32().ok_or_else(|| bad("truncated version"))?;
        if version != FORMAT_VERSION {
            return Err(bad(&format!("unsupported format version {version}")));
        }
        let header_len = r.u64().ok_or_else(|| bad("truncated header"))? as usize;
        let header: CheckpointHeader = serde_json::from_slice(r.take(header_len).ok_or_else(|| bad("truncated header"))?)?;
        let count = r.u64().ok_or_else(|| bad("truncated tensor count"))?;
        let mut store = ParamStore::new();
        let mut momentum = BTreeMap::new();
        for _ in 0..count {
            let name_len = r.u32().ok_or_else(|| bad("truncated tensor name"))? as usize;
            let name = std::str::from_utf8(r.take(name_len).ok_or_else(|| bad("truncated tensor name"))?)
                .map_err(|_| bad("tensor name is not utf-8"))?
                .to_string();
            let ndim = r.u32().ok_or_else(|| bad("truncated tensor shape"))? as usize;
            let shape: Vec<usize> = (0..ndim)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Option<_>>()
                .ok_or_else(|| bad("truncated tensor shape"))?;
            let n = numel(&shape);
            let raw = r.take(n * 8).ok_or_else(|| bad(&format!("truncated data for {name}")))?;
            let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            let array = Array::new(shape, data);
            if let Some(k) = name.strip_prefix("param/") {
                store.insert_param(k, array);
            } else if let Some(k) = name.strip_prefix("buffer/") {
                store.insert_buffer(k, array);
            } else if let Some(k) = name.strip_prefix("momentum/") {
                momentum.insert(k.to_string(), array);
            } else {
                return Err(bad(&format!("unknown tensor namespace in {name}")));
            }
        }
        if r.pos != bytes.len() {
            return Err(bad("trailing bytes"));
        }
        Ok(Self { header, store, momentum })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n)?;
        let s = self.bytes.get(self.pos..end)?;
        self.pos = end;
        Some(s)
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes(b.try_into().unwrap()))
    }

    fn u64(&mut self) -> Option<u64> {
        self.take(8).map(|b| u64::from_le_bytes(b.try_into().unwrap()))
    }
}
