//! Binary checkpoint container.
//!
//! Layout: 8-byte magic, `u32` version, `u64` header length, UTF-8 JSON
//! header (config echo, parameter names and shapes, free-form metadata),
//! then every parameter as row-major `f64` values, all little-endian.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Model, ModelConfig, ModelError};
use crate::tensorcore::Tensor;

const MAGIC: &[u8; 8] = b"EQLNKCKP";
const VERSION: u32 = 1;

type Result<T> = std::result::Result<T, ModelError>;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    config: ModelConfig,
    params: Vec<ParamEntry>,
    meta: serde_json::Value,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
}

fn bad(msg: impl Into<String>) -> ModelError {
    ModelError::Checkpoint(msg.into())
}

pub fn checkpoint_bytes(model: &Model, meta: &serde_json::Value) -> Vec<u8> {
    let header = Header {
        config: model.cfg.clone(),
        params: model
            .store
            .ids()
            .map(|id| ParamEntry {
                name: model.store.name(id).to_string(),
                shape: model.store.get(id).shape().to_vec(),
            })
            .collect(),
        meta: meta.clone(),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(20 + json.len() + 8 * model.store.num_scalars());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for t in model.store.tensors() {
        for x in t.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out
}

/// Parses a checkpoint. With `expected` set, the stored config must match.
pub fn model_from_bytes(
    bytes: &[u8],
    expected: Option<&ModelConfig>,
) -> Result<(Model, serde_json::Value)> {
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint file"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let body = bytes
        .get(20..20 + hlen)
        .ok_or_else(|| bad("truncated header"))?;
    let header: Header = serde_json::from_slice(body).map_err(|e| bad(format!("header: {e}")))?;
    header
        .config
        .validate()
        .map_err(|e| bad(format!("config: {e}")))?;
    if let Some(want) = expected {
        if *want != header.config {
            return Err(ModelError::ConfigMismatch);
        }
    }
    let mut model = Model::new(header.config, 0);
    let mut pos = 20 + hlen;
    let mut names = Vec::with_capacity(header.params.len());
    let mut values = Vec::with_capacity(header.params.len());
    for p in header.params {
        let k: usize = p.shape.iter().product();
        let raw = bytes
            .get(pos..pos + 8 * k)
            .ok_or_else(|| bad(format!("truncated payload for {}", p.name)))?;
        pos += 8 * k;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        values.push(Tensor::new(p.shape, data).map_err(|e| bad(e.to_string()))?);
        names.push(p.name);
    }
    if pos != bytes.len() {
        return Err(bad("trailing bytes after payload"));
    }
    model
        .store
        .load_values(&names, values)
        .map_err(|e| bad(e.to_string()))?;
    Ok((model, header.meta))
}

pub fn save_checkpoint(path: &Path, model: &Model, meta: &serde_json::Value) -> Result<()> {
    std::fs::write(path, checkpoint_bytes(model, meta))
        .map_err(|e| ModelError::Io(format!("{}: {e}", path.display())))
}

pub fn load_checkpoint(
    path: &Path,
    expected: Option<&ModelConfig>,
) -> Result<(Model, serde_json::Value)> {
    let bytes =
        std::fs::read(path).map_err(|e| ModelError::Io(format!("{}: {e}", path.display())))?;
    model_from_bytes(&bytes, expected)
}
