//! Binary parameter files: a little-endian `u64` header length, a JSON
//! header, then every parameter as little-endian `f64` in header order.

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Shape, Tensor};
use crate::model::{Model, ModelConfig, ModelError, ParamSet};
use crate::scalar::Scalar;

const FORMAT: &str = "cetn-checkpoint";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io { path: String, source: io::Error },
    #[error("{path}: {detail}")]
    Format { path: String, detail: String },
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format: String,
    pub version: u32,
    pub model: ModelConfig,
    pub vocab_sizes: Vec<usize>,
    pub embedding_dim: usize,
    pub params: Vec<ParamEntry>,
    /// free-form run information (epoch, validation metrics, seed)
    #[serde(default)]
    pub info: serde_json::Value,
}

pub fn save<S: Scalar>(model: &Model<S>, info: serde_json::Value, path: &Path) -> Result<(), CheckpointError> {
    let io_err = |source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    };
    let header = CheckpointHeader {
        format: FORMAT.into(),
        version: VERSION,
        model: model.config.clone(),
        vocab_sizes: model.embedding.vocab_sizes.clone(),
        embedding_dim: model.embedding.dim,
        params: model
            .params
            .names()
            .iter()
            .zip(model.params.tensors())
            .map(|(n, t)| ParamEntry {
                name: n.clone(),
                shape: t.shape.dims().to_vec(),
            })
            .collect(),
        info,
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut buf = Vec::with_capacity(8 + json.len() + model.params.numel() * 8);
    buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&json);
    for t in model.params.tensors() {
        for x in &t.data {
            buf.extend_from_slice(&x.to_f64_lossy().to_le_bytes());
        }
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err)?;
    }
    let mut f = fs::File::create(path).map_err(io_err)?;
    f.write_all(&buf).map_err(io_err)
}

pub fn read_header(path: &Path) -> Result<CheckpointHeader, CheckpointError> {
    let mut f = fs::File::open(path).map_err(|source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    })?;
    header_from(&mut f, path)
}

fn header_from(r: &mut impl Read, path: &Path) -> Result<CheckpointHeader, CheckpointError> {
    let fmt = |detail: String| CheckpointError::Format {
        path: path.display().to_string(),
        detail,
    };
    let mut len = [0u8; 8];
    r.read_exact(&mut len).map_err(|e| fmt(format!("truncated header length: {e}")))?;
    let len = u64::from_le_bytes(len) as usize;
    if len > 64 << 20 {
        return Err(fmt(format!("implausible header length {len}")));
    }
    let mut json = vec![0u8; len];
    r.read_exact(&mut json).map_err(|e| fmt(format!("truncated header: {e}")))?;
    let header: CheckpointHeader = serde_json::from_slice(&json).map_err(|e| fmt(format!("bad header: {e}")))?;
    if header.format != FORMAT || header.version != VERSION {
        return Err(fmt(format!("unsupported format {} v{}", header.format, header.version)));
    }
    Ok(header)
}

/// Loads a model and the header's `info` block.
pub fn load<S: Scalar>(path: &Path) -> Result<(Model<S>, CheckpointHeader), CheckpointError> {
    let fmt = |detail: String| CheckpointError::Format {
        path: path.display().to_string(),
        detail,
    };
    let bytes = fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut cursor = &bytes[..];
    let header = header_from(&mut cursor, path)?;
    let total: usize = header.params.iter().map(|p| p.shape.iter().product::<usize>()).sum();
    if cursor.len() != total * 8 {
        return Err(fmt(format!("{} payload bytes, expected {}", cursor.len(), total * 8)));
    }
    let mut values = cursor
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
    let mut params = ParamSet::default();
    for p in &header.params {
        if p.shape.is_empty() || p.shape.len() > 2 || p.shape.contains(&0) {
            return Err(fmt(format!("parameter `{}` has invalid shape {:?}", p.name, p.shape)));
        }
        let shape = Shape::new(p.shape.clone());
        let data: Vec<S> = values.by_ref().take(shape.numel()).map(S::lit).collect();
        params.push(p.name.clone(), Tensor::new(shape, data));
    }
    let mut config = header.model.clone();
    config.embedding_dim = header.embedding_dim;
    let model = Model::from_params(config, header.vocab_sizes.clone(), params)?;
    Ok((model, header))
}
