//! Model checkpoints: 8-byte magic, `u64` LE header length, JSON header,
//! then every tensor as row-major little-endian `f32` in header order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{EnhancerModel, HyperParams};
use crate::error::{Error, Result};
use crate::fsutil::write_atomic;
use crate::optim::ParamStore;
use crate::tensor::Matrix;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"POIENHC1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorInfo {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
pub struct CheckpointMeta {
    pub template_version: String,
    pub backend_id: String,
    pub chunk_size: usize,
    pub seed: u64,
    pub epoch: Option<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    hyperparams: HyperParams,
    meta: CheckpointMeta,
    tensors: Vec<TensorInfo>,
}

pub fn encode_checkpoint(model: &EnhancerModel, meta: &CheckpointMeta) -> Result<Vec<u8>> {
    let header = Header {
        hyperparams: model.hp.clone(),
        meta: meta.clone(),
        tensors: model
            .params
            .iter()
            .map(|(name, m)| TensorInfo {
                name: name.to_string(),
                rows: m.rows(),
                cols: m.cols(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(16 + json.len() + 4 * model.param_count());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, m) in model.params.iter() {
        for &v in m.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<(EnhancerModel, CheckpointMeta)> {
    let corrupt = |message: String| Error::Corrupt {
        path: path.to_path_buf(),
        message,
    };
    if bytes.len() < 16 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(corrupt("not a checkpoint (bad magic)".into()));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body_start = 16usize
        .checked_add(hlen)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| corrupt("truncated header".into()))?;
    let header: Header = serde_json::from_slice(&bytes[16..body_start])
        .map_err(|e| corrupt(format!("bad header: {e}")))?;
    let mut offset = body_start;
    let mut store = ParamStore::new();
    for t in &header.tensors {
        let n = t.rows * t.cols;
        let end = offset + 4 * n;
        if end > bytes.len() {
            return Err(corrupt(format!("truncated tensor `{}`", t.name)));
        }
        let data = bytes[offset..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
        store.add(t.name.clone(), Matrix::new(t.rows, t.cols, data));
        offset = end;
    }
    if offset != bytes.len() {
        return Err(corrupt(format!("{} trailing bytes", bytes.len() - offset)));
    }
    let model = EnhancerModel::from_params(header.hyperparams, store)?;
    Ok((model, header.meta))
}

pub fn save_checkpoint(path: &Path, model: &EnhancerModel, meta: &CheckpointMeta) -> Result<()> {
    write_atomic(path, &encode_checkpoint(model, meta)?)
}

pub fn load_checkpoint(path: &Path) -> Result<(EnhancerModel, CheckpointMeta)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes, path)
}

/// Rounds every parameter to `f32` precision, the form a checkpoint stores.
pub fn round_to_f32(model: &EnhancerModel) -> EnhancerModel {
    let mut m = model.clone();
    let ids: Vec<_> = m.params.ids().collect();
    for id in ids {
        for v in m.params.get_mut(id).data_mut() {
            *v = *v as f32 as f64;
        }
    }
    m
}
