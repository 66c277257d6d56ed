//! Single-file binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "EMRX" | version: u32 = 1 | header_len: u64 | header: UTF-8 JSON | payload
//! ```
//!
//! The JSON header carries `arch_id`, `num_classes`, `class_names`, the
//! parameter records `params` (`name`, `shape`, `byte_offset`,
//! `byte_length`) and `training` metadata. The payload is every parameter as
//! raw little-endian `f32` values, row-major, in record order; the records
//! tile it exactly. Unknown header keys survive a load/save cycle.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::model::{ArchId, Model, ModelSpec, Parameter};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"EMRX";
pub const FORMAT_VERSION: u32 = 1;
const PREAMBLE: usize = 4 + 4 + 8;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("bad magic")]
    BadMagic,
    #[error("unsupported checkpoint version {found} (expected {FORMAT_VERSION})")]
    VersionMismatch { found: u32 },
    #[error("truncated {section}: need {needed} bytes, have {available}")]
    Truncated {
        section: &'static str,
        needed: u64,
        available: u64,
    },
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("payload layout: {0}")]
    Layout(String),
}

impl CheckpointError {
    /// Stable short identifier for the failure class.
    pub fn code(&self) -> &'static str {
        match self {
            CheckpointError::BadMagic => "bad_magic",
            CheckpointError::VersionMismatch { .. } => "version_mismatch",
            CheckpointError::Truncated { .. } => "truncated",
            CheckpointError::MalformedHeader(_) => "malformed_header",
            CheckpointError::ShapeMismatch(_) => "shape_mismatch",
            CheckpointError::Layout(_) => "layout",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub byte_offset: u64,
    pub byte_length: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingMetadata {
    pub epochs_trained: usize,
    pub final_lr: f64,
    pub master_seed: u64,
    /// Additional run configuration (optimizer, freeze policy, ...).
    #[serde(flatten)]
    pub extra: Map<String, Value>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    arch_id: ArchId,
    num_classes: usize,
    class_names: Vec<String>,
    params: Vec<ParamRecord>,
    training: TrainingMetadata,
    #[serde(flatten)]
    extra: Map<String, Value>,
}

/// Everything in a checkpoint besides the parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointMeta {
    pub class_names: Vec<String>,
    pub training: TrainingMetadata,
    /// Unrecognised top-level header keys.
    pub extra: Map<String, Value>,
}

impl CheckpointMeta {
    pub fn new(class_names: Vec<String>, training: TrainingMetadata) -> Self {
        CheckpointMeta {
            class_names,
            training,
            extra: Map::new(),
        }
    }
}

/// Serialises `model` and `meta` into checkpoint bytes.
pub fn to_bytes<T: Scalar>(model: &Model<T>, meta: &CheckpointMeta) -> Result<Vec<u8>> {
    if meta.class_names.len() != model.spec.num_classes {
        return Err(Error::InvalidArgument(format!(
            "{} class names for a {}-class model",
            meta.class_names.len(),
            model.spec.num_classes
        )));
    }
    let mut records = Vec::with_capacity(model.params.len());
    let mut offset = 0u64;
    for p in &model.params {
        let len = (p.tensor.len() * 4) as u64;
        records.push(ParamRecord {
            name: p.name.clone(),
            shape: p.tensor.shape().to_vec(),
            byte_offset: offset,
            byte_length: len,
        });
        offset += len;
    }
    let header = Header {
        arch_id: model.spec.arch_id,
        num_classes: model.spec.num_classes,
        class_names: meta.class_names.clone(),
        params: records,
        training: meta.training.clone(),
        extra: meta.extra.clone(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| CheckpointError::MalformedHeader(e.to_string()))?;
    let mut out = Vec::with_capacity(PREAMBLE + json.len() + offset as usize);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for p in &model.params {
        for &v in p.tensor.data() {
            out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
    }
    Ok(out)
}

fn take<'b>(bytes: &'b [u8], at: usize, len: usize, section: &'static str) -> Result<&'b [u8], CheckpointError> {
    bytes.get(at..at.saturating_add(len)).ok_or(CheckpointError::Truncated {
        section,
        needed: (at + len) as u64,
        available: bytes.len() as u64,
    })
}

/// Parses checkpoint bytes, validating the layout against the architecture.
pub fn from_bytes<T: Scalar>(bytes: &[u8]) -> Result<(Model<T>, CheckpointMeta)> {
    if bytes.len() >= 4 && &bytes[..4] != MAGIC {
        return Err(CheckpointError::BadMagic.into());
    }
    let magic = take(bytes, 0, 4, "preamble")?;
    if magic != MAGIC {
        return Err(CheckpointError::BadMagic.into());
    }
    let version = u32::from_le_bytes(take(bytes, 4, 4, "preamble")?.try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(CheckpointError::VersionMismatch { found: version }.into());
    }
    let header_len = u64::from_le_bytes(take(bytes, 8, 8, "preamble")?.try_into().expect("8 bytes"));
    let header_len = usize::try_from(header_len).map_err(|_| CheckpointError::Truncated {
        section: "header",
        needed: header_len,
        available: bytes.len() as u64,
    })?;
    let header_bytes = take(bytes, PREAMBLE, header_len, "header")?;
    let header: Header =
        serde_json::from_slice(header_bytes).map_err(|e| CheckpointError::MalformedHeader(e.to_string()))?;

    let spec = ModelSpec::new(header.arch_id, header.num_classes)
        .map_err(|e| CheckpointError::MalformedHeader(e.to_string()))?;
    if header.class_names.len() != header.num_classes {
        return Err(CheckpointError::MalformedHeader(format!(
            "{} class names for {} classes",
            header.class_names.len(),
            header.num_classes
        ))
        .into());
    }
    let layout = spec.param_layout();
    if layout.len() != header.params.len() {
        return Err(CheckpointError::ShapeMismatch(format!(
            "{} expects {} parameters, header lists {}",
            header.arch_id,
            layout.len(),
            header.params.len()
        ))
        .into());
    }
    let mut expected_offset = 0u64;
    for ((name, shape), rec) in layout.iter().zip(&header.params) {
        if *name != rec.name || *shape != rec.shape {
            return Err(CheckpointError::ShapeMismatch(format!(
                "expected {name} {shape:?}, found {} {:?}",
                rec.name, rec.shape
            ))
            .into());
        }
        let numel: u64 = shape.iter().map(|&d| d as u64).product();
        if rec.byte_offset != expected_offset || rec.byte_length != numel * 4 {
            return Err(CheckpointError::Layout(format!(
                "{} at offset {} length {}, expected offset {expected_offset} length {}",
                rec.name,
                rec.byte_offset,
                rec.byte_length,
                numel * 4
            ))
            .into());
        }
        expected_offset += rec.byte_length;
    }
    let payload = &bytes[PREAMBLE + header_len..];
    if (payload.len() as u64) < expected_offset {
        return Err(CheckpointError::Truncated {
            section: "payload",
            needed: expected_offset,
            available: payload.len() as u64,
        }
        .into());
    }
    if payload.len() as u64 > expected_offset {
        return Err(CheckpointError::Layout(format!(
            "{} trailing bytes after payload",
            payload.len() as u64 - expected_offset
        ))
        .into());
    }

    let mut params = Vec::with_capacity(layout.len());
    for rec in &header.params {
        let raw = &payload[rec.byte_offset as usize..(rec.byte_offset + rec.byte_length) as usize];
        let data = raw
            .chunks_exact(4)
            .map(|c| T::from_f64_lossy(f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64))
            .collect();
        params.push(Parameter {
            name: rec.name.clone(),
            tensor: Tensor::new(&rec.shape, data)?,
            trainable: true,
        });
    }
    let model = Model::from_parts(spec, params)?;
    let meta = CheckpointMeta {
        class_names: header.class_names,
        training: header.training,
        extra: header.extra,
    };
    Ok((model, meta))
}

pub fn save_checkpoint<T: Scalar>(model: &Model<T>, meta: &CheckpointMeta, path: &Path) -> Result<()> {
    let bytes = to_bytes(model, meta)?;
    fs::write(path, bytes).map_err(|e| Error::from(e).in_file(path))
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<(Model<T>, CheckpointMeta)> {
    let bytes = fs::read(path).map_err(|e| Error::from(e).in_file(path))?;
    from_bytes(&bytes).map_err(|e| e.in_file(path))
}
