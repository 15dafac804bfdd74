//! Single-file binary checkpoints.
//!
//! Layout: the 9-byte magic `PGSTCKPT1`, a little-endian `u64` header
//! length, a JSON header, then every tensor as raw little-endian values in
//! header order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::model::{GroundingModel, ModelConfig};
use crate::error::{PgstError, Result};
use crate::scalar::Scalar;

pub const CHECKPOINT_MAGIC: &[u8; 9] = b"PGSTCKPT1";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    len: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    dtype: String,
    config: ModelConfig,
    tensors: Vec<TensorEntry>,
    metadata: serde_json::Value,
}

pub fn checkpoint_to_bytes<T: Scalar>(model: &GroundingModel<T>, metadata: &serde_json::Value) -> Result<Vec<u8>> {
    let header = Header {
        format_version: FORMAT_VERSION,
        dtype: T::DTYPE.to_string(),
        config: model.config().clone(),
        tensors: model
            .param_names()
            .into_iter()
            .zip(model.params())
            .map(|(name, p)| TensorEntry { name, len: p.len() })
            .collect(),
        metadata: metadata.clone(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(json.len() + 17);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for p in model.params() {
        for &v in p {
            v.write_le(&mut out);
        }
    }
    Ok(out)
}

fn read_values<T: Scalar>(bytes: &[u8], dtype: &str, len: usize) -> Result<(Vec<T>, usize)> {
    let width = match dtype {
        "f32" => 4,
        "f64" => 8,
        other => return Err(PgstError::Checkpoint(format!("unsupported dtype {other:?}"))),
    };
    let need = len * width;
    if bytes.len() < need {
        return Err(PgstError::Checkpoint("tensor data truncated".into()));
    }
    let values = bytes[..need]
        .chunks_exact(width)
        .map(|c| {
            let v = if width == 4 {
                f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64
            } else {
                f64::from_le_bytes(c.try_into().expect("8 bytes"))
            };
            T::of(v)
        })
        .collect();
    Ok((values, need))
}

/// Parses a checkpoint, converting stored values to `T` if needed.
pub fn checkpoint_from_bytes<T: Scalar>(bytes: &[u8]) -> Result<(GroundingModel<T>, serde_json::Value)> {
    let bad = |m: &str| PgstError::Checkpoint(m.to_string());
    if bytes.len() < 17 || &bytes[..9] != CHECKPOINT_MAGIC {
        return Err(bad("missing PGSTCKPT1 magic"));
    }
    let hlen = u64::from_le_bytes(bytes[9..17].try_into().expect("8 bytes")) as usize;
    let body = &bytes[17..];
    if body.len() < hlen {
        return Err(bad("header truncated"));
    }
    let header: Header = serde_json::from_slice(&body[..hlen])
        .map_err(|e| PgstError::Checkpoint(format!("bad header: {e}")))?;
    if header.format_version != FORMAT_VERSION {
        return Err(PgstError::Checkpoint(format!("unsupported format version {}", header.format_version)));
    }
    let mut model = GroundingModel::<T>::new(header.config)?;
    let names = model.param_names();
    if header.tensors.len() != names.len() || header.tensors.iter().zip(&names).any(|(t, n)| &t.name != n) {
        return Err(bad("tensor list does not match the model layout"));
    }
    let mut data = &body[hlen..];
    let mut tensors = Vec::with_capacity(names.len());
    for entry in &header.tensors {
        let (values, used) = read_values::<T>(data, &header.dtype, entry.len)?;
        data = &data[used..];
        tensors.push(values);
    }
    if !data.is_empty() {
        return Err(bad("trailing bytes after tensor data"));
    }
    model.set_params(tensors)?;
    if !model.is_finite() {
        return Err(bad("non-finite weights"));
    }
    Ok((model, header.metadata))
}

pub fn save_checkpoint<T: Scalar>(model: &GroundingModel<T>, metadata: &serde_json::Value, path: &Path) -> Result<()> {
    let bytes = checkpoint_to_bytes(model, metadata)?;
    fs::write(path, bytes).map_err(|e| PgstError::io(path, e))
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<(GroundingModel<T>, serde_json::Value)> {
    let bytes = fs::read(path).map_err(|e| PgstError::io(path, e))?;
    checkpoint_from_bytes(&bytes)
}
