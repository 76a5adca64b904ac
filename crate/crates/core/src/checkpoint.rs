//! `.tgrw` checkpoint files.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! b"TGRW" | version: u32 = 1 | header_len: u64 | header JSON | payload
//! ```
//!
//! The header is `{"config": ModelConfig, "tensors": [{name, rows, cols,
//! offset_bytes}, ...]}`, space-padded so the payload starts on an 8-byte
//! boundary. Offsets are relative to the payload start. Tensor data is raw
//! row-major `f64`. Tensors are written in canonical order, so equal models
//! produce byte-identical files.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::error::{Error, Result};
use crate::model::{validate, Model, ModelConfig, ModelParams};
use crate::tensor::Matrix;

pub const MAGIC: &[u8; 4] = b"TGRW";
pub const VERSION: u32 = 1;
const PREAMBLE: usize = 16;
const ALIGN: usize = 8;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CheckpointError {
    #[error("bad magic: expected \"TGRW\"")]
    BadMagic,
    #[error("unsupported version {0} (expected {VERSION})")]
    UnsupportedVersion(u32),
    #[error("file too short for header ({0} bytes)")]
    TooShort(usize),
    #[error("malformed header: {0}")]
    Header(String),
    #[error("tensor {name}: directory shape {found:?} conflicts with config shape {expected:?}")]
    Shape {
        name: String,
        expected: (usize, usize),
        found: (usize, usize),
    },
    #[error("tensor {name}: bad offset {offset}: {reason}")]
    Offset {
        name: String,
        offset: u64,
        reason: &'static str,
    },
    #[error("tensor {name}: payload truncated")]
    Truncated { name: String },
    #[error("tensor {0} missing from directory")]
    MissingTensor(String),
    #[error("unexpected tensor {0} in directory")]
    UnknownTensor(String),
    #[error("tensor {0} listed twice")]
    DuplicateTensor(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub offset_bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub config: ModelConfig,
    pub tensors: Vec<TensorEntry>,
}

/// Serializes a model to bytes.
pub fn to_bytes(config: &ModelConfig, params: &ModelParams) -> Result<Vec<u8>> {
    config.check()?;
    validate(params, config).map_err(Error::Validation)?;
    let tensors = params.tensors();
    let mut entries = Vec::with_capacity(tensors.len());
    let mut offset = 0u64;
    for (name, m) in &tensors {
        entries.push(TensorEntry {
            name: name.clone(),
            rows: m.rows(),
            cols: m.cols(),
            offset_bytes: offset,
        });
        offset += (m.len() * 8) as u64;
    }
    let header = Header {
        config: config.clone(),
        tensors: entries,
    };
    let mut json = serde_json::to_vec(&header).expect("header serializes");
    while !(PREAMBLE + json.len()).is_multiple_of(ALIGN) {
        json.push(b' ');
    }
    let mut out = Vec::with_capacity(PREAMBLE + json.len() + offset as usize);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, m) in &tensors {
        for v in m.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

/// Parses only the preamble and header.
pub fn read_header(bytes: &[u8]) -> std::result::Result<(Header, usize), CheckpointError> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    if bytes.len() < PREAMBLE {
        return Err(CheckpointError::TooShort(bytes.len()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(CheckpointError::UnsupportedVersion(version));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
    let payload_start = usize::try_from(header_len)
        .ok()
        .and_then(|l| l.checked_add(PREAMBLE))
        .filter(|&end| end <= bytes.len())
        .ok_or(CheckpointError::TooShort(bytes.len()))?;
    let header: Header =
        serde_json::from_slice(&bytes[PREAMBLE..payload_start]).map_err(|e| CheckpointError::Header(e.to_string()))?;
    Ok((header, payload_start))
}

/// Deserializes a model, checking the directory against the config.
pub fn from_bytes(bytes: &[u8]) -> Result<Model> {
    let (header, payload_start) = read_header(bytes)?;
    let config = header.config;
    config.check().map_err(|e| CheckpointError::Header(e.to_string()))?;
    let payload = &bytes[payload_start..];

    let mut params = ModelParams::zeros(&config);
    let expected: HashMap<String, (usize, usize)> = params.tensors().into_iter().map(|(n, m)| (n, m.shape())).collect();
    let mut seen = HashSet::new();
    let mut next_free = 0u64;
    let mut loaded: HashMap<String, Matrix> = HashMap::new();
    for entry in &header.tensors {
        let name = &entry.name;
        let Some(&shape) = expected.get(name) else {
            return Err(CheckpointError::UnknownTensor(name.clone()).into());
        };
        if !seen.insert(name.clone()) {
            return Err(CheckpointError::DuplicateTensor(name.clone()).into());
        }
        if shape != (entry.rows, entry.cols) {
            return Err(CheckpointError::Shape {
                name: name.clone(),
                expected: shape,
                found: (entry.rows, entry.cols),
            }
            .into());
        }
        let offset_err = |reason| CheckpointError::Offset {
            name: name.clone(),
            offset: entry.offset_bytes,
            reason,
        };
        if entry.offset_bytes % ALIGN as u64 != 0 {
            return Err(offset_err("not 8-byte aligned").into());
        }
        if entry.offset_bytes < next_free {
            return Err(offset_err("overlaps or precedes previous tensor").into());
        }
        let len = (entry.rows * entry.cols * 8) as u64;
        let end = entry.offset_bytes + len;
        if end > payload.len() as u64 {
            return Err(CheckpointError::Truncated { name: name.clone() }.into());
        }
        next_free = end;
        let data = payload[entry.offset_bytes as usize..end as usize]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        loaded.insert(name.clone(), Matrix::from_vec(entry.rows, entry.cols, data)?);
    }
    for (name, slot) in params.tensors_mut() {
        match loaded.remove(&name) {
            Some(m) => *slot = m,
            None => return Err(CheckpointError::MissingTensor(name).into()),
        }
    }
    Model::new(config, params)
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Writes a checkpoint atomically: the bytes go to a temporary sibling file
/// which is then renamed over `path`.
pub fn save(config: &ModelConfig, params: &ModelParams, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = to_bytes(config, params)?;
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::invalid(format!("{} is not a file path", path.display())))?;
    let mut tmp_name = std::ffi::OsString::from(".");
    tmp_name.push(file_name);
    tmp_name.push(format!(".tmp{}", std::process::id()));
    let tmp: PathBuf = path.with_file_name(tmp_name);
    let result = (|| {
        let mut f = fs::File::create(&tmp).map_err(io_err(&tmp))?;
        f.write_all(&bytes).map_err(io_err(&tmp))?;
        f.sync_all().map_err(io_err(&tmp))?;
        fs::rename(&tmp, path).map_err(io_err(path))
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    result
}

pub fn save_model(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    save(&model.config, &model.params, path)
}

pub fn load(path: impl AsRef<Path>) -> Result<Model> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(io_err(path))?;
    from_bytes(&bytes)
}

#[derive(Debug, Clone, PartialEq)]
pub enum DiffKind {
    /// Same shape in both; largest absolute entry difference.
    Same {
        max_abs: f64,
    },
    /// Shape changed; `overlap_max_abs` compares the shared top-left block.
    Reshaped {
        before: (usize, usize),
        after: (usize, usize),
        overlap_max_abs: f64,
    },
    Added {
        shape: (usize, usize),
    },
    Removed {
        shape: (usize, usize),
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiffEntry {
    pub name: String,
    pub kind: DiffKind,
}

impl fmt::Display for DiffEntry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.kind {
            DiffKind::Same { max_abs } => write!(f, "{} same max_abs={max_abs:e}", self.name),
            DiffKind::Reshaped {
                before,
                after,
                overlap_max_abs,
            } => write!(
                f,
                "{} reshaped {}x{}->{}x{} overlap_max_abs={overlap_max_abs:e}",
                self.name, before.0, before.1, after.0, after.1
            ),
            DiffKind::Added { shape } => write!(f, "{} added {}x{}", self.name, shape.0, shape.1),
            DiffKind::Removed { shape } => write!(f, "{} removed {}x{}", self.name, shape.0, shape.1),
        }
    }
}

fn overlap_diff(a: &Matrix, b: &Matrix) -> f64 {
    let rows = a.rows().min(b.rows());
    let cols = a.cols().min(b.cols());
    let mut worst: f64 = 0.0;
    for r in 0..rows {
        for c in 0..cols {
            worst = worst.max((a.get(r, c) - b.get(r, c)).abs());
        }
    }
    worst
}

/// Per-tensor comparison of two parameter sets, matched by name.
pub fn diff_params(a: &ModelParams, b: &ModelParams) -> Vec<DiffEntry> {
    let b_map: HashMap<String, &Matrix> = b.tensors().into_iter().collect();
    let a_tensors = a.tensors();
    let a_names: HashSet<&str> = a_tensors.iter().map(|(n, _)| n.as_str()).collect();
    let mut out = Vec::new();
    for (name, ma) in &a_tensors {
        let kind = match b_map.get(name) {
            None => DiffKind::Removed { shape: ma.shape() },
            Some(mb) if mb.shape() == ma.shape() => DiffKind::Same {
                max_abs: ma.max_abs_diff(mb).expect("same shape"),
            },
            Some(mb) => DiffKind::Reshaped {
                before: ma.shape(),
                after: mb.shape(),
                overlap_max_abs: overlap_diff(ma, mb),
            },
        };
        out.push(DiffEntry {
            name: name.clone(),
            kind,
        });
    }
    for (name, mb) in b.tensors() {
        if !a_names.contains(name.as_str()) {
            out.push(DiffEntry {
                name,
                kind: DiffKind::Added { shape: mb.shape() },
            });
        }
    }
    out
}

/// Loads both checkpoints and diffs them tensor by tensor.
pub fn diff(path_a: impl AsRef<Path>, path_b: impl AsRef<Path>) -> Result<Vec<DiffEntry>> {
    let a = load(path_a)?;
    let b = load(path_b)?;
    Ok(diff_params(&a.params, &b.params))
}
