//! Binary checkpoint container.
//!
//! Layout, all integers little-endian:
//! `"C2IM" | version u32 | entry count u32 | entries | crc32 u32`, where an
//! entry is `name_len u32 | name | ndim u32 | dims u32 x ndim | f32 data`.
//! The CRC covers every byte before it. Metadata rides along as ordinary
//! entries under the `meta.` prefix and optimizer moments under `opt.`.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use capgan_tensor::{AdamState, Float, Tensor};
use thiserror::Error;

use crate::nn::NamedParams;

pub const MAGIC: &[u8; 4] = b"C2IM";
pub const FORMAT_VERSION: u32 = 1;
const KIND_PREFIX: &str = "meta.model_kind.";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("I/O error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },

    #[error("bad magic {found:?}: not a checkpoint file")]
    BadMagic { found: Vec<u8> },

    #[error("unsupported checkpoint format version {0}")]
    UnsupportedVersion(u32),

    #[error("truncated checkpoint: {0}")]
    Truncated(String),

    #[error("checkpoint integrity error: stored CRC {stored:#010x}, computed {computed:#010x}")]
    Integrity { stored: u32, computed: u32 },

    #[error("entry {0:?} appears more than once")]
    Duplicate(String),

    #[error("missing parameter {0:?}")]
    Missing(String),

    #[error("parameter {name:?} has shape {found:?}, expected {expected:?}")]
    Shape { name: String, found: Vec<usize>, expected: Vec<usize> },

    #[error("unexpected parameter {0:?} for this model")]
    Unexpected(String),

    #[error("checkpoint holds a {found:?} model, expected {expected:?}")]
    Kind { expected: String, found: Option<String> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    pub entries: Vec<Entry>,
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn take(&mut self, n: usize, what: &str) -> Result<&[u8], CheckpointError> {
        if self.bytes.len() - self.pos < n {
            return Err(CheckpointError::Truncated(format!(
                "needed {n} bytes for {what} at offset {}, only {} left",
                self.pos,
                self.bytes.len() - self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, shape: &[usize], data: Vec<f32>) {
        self.entries.push(Entry { name: name.into(), shape: shape.to_vec(), data });
    }

    pub fn push_tensor<T: Float>(&mut self, name: impl Into<String>, t: &Tensor<T>) {
        let data = t.data().iter().map(|v| v.as_f64() as f32).collect();
        self.push(name, t.shape(), data);
    }

    pub fn get(&self, name: &str) -> Option<&Entry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn set_kind(&mut self, kind: &str) {
        self.entries.retain(|e| !e.name.starts_with(KIND_PREFIX));
        self.push(format!("{KIND_PREFIX}{kind}"), &[1], vec![1.0]);
    }

    pub fn kind(&self) -> Option<&str> {
        self.entries.iter().find_map(|e| e.name.strip_prefix(KIND_PREFIX))
    }

    pub fn expect_kind(&self, kind: &str) -> Result<(), CheckpointError> {
        match self.kind() {
            Some(k) if k == kind => Ok(()),
            other => Err(CheckpointError::Kind { expected: kind.into(), found: other.map(String::from) }),
        }
    }

    /// Small integer metadata (dimensions, counts), stored as `meta.<key>`.
    pub fn set_meta(&mut self, key: &str, value: usize) {
        let name = format!("meta.{key}");
        self.entries.retain(|e| e.name != name);
        assert!(value < (1 << 24), "meta value {value} is not exactly representable");
        self.push(name, &[1], vec![value as f32]);
    }

    pub fn meta(&self, key: &str) -> Result<usize, CheckpointError> {
        let name = format!("meta.{key}");
        let e = self.get(&name).ok_or(CheckpointError::Missing(name))?;
        Ok(e.data[0] as usize)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for e in &self.entries {
            out.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
            out.extend_from_slice(e.name.as_bytes());
            out.extend_from_slice(&(e.shape.len() as u32).to_le_bytes());
            for &d in &e.shape {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in &e.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    /// Checks run in order: magic, version, structure, CRC, duplicate names.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        if bytes.len() < 4 {
            return Err(CheckpointError::Truncated(format!("file has only {} bytes", bytes.len())));
        }
        if &bytes[..4] != MAGIC {
            return Err(CheckpointError::BadMagic { found: bytes[..4].to_vec() });
        }
        if bytes.len() < 12 {
            return Err(CheckpointError::Truncated("header incomplete".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(CheckpointError::UnsupportedVersion(version));
        }
        let body_len = bytes
            .len()
            .checked_sub(4)
            .filter(|&l| l >= 12)
            .ok_or_else(|| CheckpointError::Truncated("no room for the CRC trailer".into()))?;
        let mut cur = Cursor { bytes: &bytes[..body_len], pos: 8 };
        let count = cur.u32("entry count")? as usize;
        let mut entries = Vec::with_capacity(count.min(1 << 16));
        for i in 0..count {
            let name_len = cur.u32("name length")? as usize;
            let name = String::from_utf8(cur.take(name_len, "name")?.to_vec())
                .map_err(|_| CheckpointError::Truncated(format!("entry {i} name is not UTF-8")))?;
            let ndim = cur.u32("ndim")? as usize;
            let mut shape = Vec::with_capacity(ndim.min(16));
            for _ in 0..ndim {
                shape.push(cur.u32("dimension")? as usize);
            }
            let numel: usize = shape.iter().product();
            let raw = cur.take(
                numel
                    .checked_mul(4)
                    .ok_or_else(|| CheckpointError::Truncated(format!("entry {name:?} has an impossible size")))?,
                "tensor data",
            )?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
            entries.push(Entry { name, shape, data });
        }
        if cur.pos != body_len {
            return Err(CheckpointError::Truncated(format!("{} stray bytes after the last entry", body_len - cur.pos)));
        }
        let stored = u32::from_le_bytes(bytes[body_len..].try_into().expect("4 bytes"));
        let computed = crc32fast::hash(&bytes[..body_len]);
        if stored != computed {
            return Err(CheckpointError::Integrity { stored, computed });
        }
        let mut seen = HashSet::new();
        for e in &entries {
            if !seen.insert(e.name.as_str()) {
                return Err(CheckpointError::Duplicate(e.name.clone()));
            }
        }
        Ok(Checkpoint { entries })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        fs::write(path, self.to_bytes()).map_err(|source| CheckpointError::Io { path: path.into(), source })
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let bytes = fs::read(path).map_err(|source| CheckpointError::Io { path: path.into(), source })?;
        Self::from_bytes(&bytes)
    }

    pub fn push_params<T: Float>(&mut self, params: &NamedParams<T>) {
        for (name, t) in params {
            self.push_tensor(name.clone(), t);
        }
    }

    /// Copies every parameter from the checkpoint into `params`. Each name
    /// must be present with the same shape, and no other parameter entries
    /// (outside `meta.` and `opt.`) may exist.
    pub fn load_params<T: Float>(&self, params: &NamedParams<T>) -> Result<(), CheckpointError> {
        let expected: HashSet<&str> = params.iter().map(|(n, _)| n.as_str()).collect();
        for e in &self.entries {
            let aux = e.name.starts_with("meta.") || e.name.starts_with("opt.");
            if !aux && !expected.contains(e.name.as_str()) {
                return Err(CheckpointError::Unexpected(e.name.clone()));
            }
        }
        for (name, t) in params {
            let e = self.get(name).ok_or_else(|| CheckpointError::Missing(name.clone()))?;
            if e.shape != t.shape() {
                return Err(CheckpointError::Shape {
                    name: name.clone(),
                    found: e.shape.clone(),
                    expected: t.shape().to_vec(),
                });
            }
            t.set_data(e.data.iter().map(|&v| T::from_f64(v as f64)).collect()).expect("shape checked above");
        }
        Ok(())
    }

    /// Stores Adam moments and step count under `opt.<group>.`.
    pub fn push_adam<T: Float>(&mut self, group: &str, names: &[String], state: &AdamState<T>) {
        let step = state.step as usize;
        self.set_meta(&format!("opt.{group}.step"), step);
        for (i, name) in names.iter().enumerate() {
            let f = |v: &Vec<T>| v.iter().map(|x| x.as_f64() as f32).collect::<Vec<f32>>();
            let len = state.first_moment[i].len();
            self.push(format!("opt.{group}.m.{name}"), &[len], f(&state.first_moment[i]));
            self.push(format!("opt.{group}.v.{name}"), &[len], f(&state.second_moment[i]));
        }
    }

    pub fn load_adam<T: Float>(
        &self,
        group: &str,
        names: &[String],
        state: &mut AdamState<T>,
    ) -> Result<(), CheckpointError> {
        state.step = self.meta(&format!("opt.{group}.step"))? as u64;
        for (i, name) in names.iter().enumerate() {
            for (tag, dst) in [("m", &mut state.first_moment[i]), ("v", &mut state.second_moment[i])] {
                let key = format!("opt.{group}.{tag}.{name}");
                let e = self.get(&key).ok_or_else(|| CheckpointError::Missing(key.clone()))?;
                if e.data.len() != dst.len() {
                    return Err(CheckpointError::Shape {
                        name: key,
                        found: e.shape.clone(),
                        expected: vec![dst.len()],
                    });
                }
                *dst = e.data.iter().map(|&v| T::from_f64(v as f64)).collect();
            }
        }
        Ok(())
    }
}
