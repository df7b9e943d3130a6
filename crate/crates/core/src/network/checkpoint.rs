//! `.dppt` checkpoints: magic, header length, JSON header, f32 blobs.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Model, ModelSpec};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"DPPT0001";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    version: u32,
    spec: ModelSpec,
    /// Parameters first, then batch-norm buffers.
    tensors: Vec<TensorEntry>,
}

pub fn encode(model: &Model) -> Result<Vec<u8>> {
    let all = model.params.iter().chain(&model.buffers);
    let header = Header {
        version: CHECKPOINT_VERSION,
        spec: model.spec.clone(),
        tensors: all
            .clone()
            .map(|n| TensorEntry {
                name: n.name.clone(),
                shape: n.value.shape().to_vec(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(16 + json.len() + 4 * (model.param_count() + 64));
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for n in all {
        for v in n.value.to_f32_vec() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<Model> {
    let bad = |d: String| Error::format(path, d);
    if bytes.len() < 16 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(bad("missing DPPT0001 magic".into()));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = bytes
        .get(16..16usize.saturating_add(hlen))
        .ok_or_else(|| bad("truncated header".into()))?;
    let header: Header =
        serde_json::from_slice(body).map_err(|e| bad(format!("bad header: {e}")))?;
    if header.version != CHECKPOINT_VERSION {
        return Err(bad(format!(
            "checkpoint version {} is not supported (expected {CHECKPOINT_VERSION})",
            header.version
        )));
    }
    let mut model = Model::build(&header.spec, 0)?;
    let expected: Vec<(&str, &[usize])> = model
        .params
        .iter()
        .chain(&model.buffers)
        .map(|n| (n.name.as_str(), n.value.shape()))
        .collect();
    let found: Vec<(&str, &[usize])> = header
        .tensors
        .iter()
        .map(|e| (e.name.as_str(), e.shape.as_slice()))
        .collect();
    if expected != found {
        return Err(bad(
            "tensor table does not match the architecture of its spec".into(),
        ));
    }
    let blob = &bytes[16 + hlen..];
    let total: usize = header
        .tensors
        .iter()
        .map(|e| e.shape.iter().product::<usize>())
        .sum();
    if blob.len() != 4 * total {
        return Err(bad(format!(
            "expected {} blob bytes, found {}",
            4 * total,
            blob.len()
        )));
    }
    let mut floats = blob
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]));
    for n in model.params.iter_mut().chain(model.buffers.iter_mut()) {
        let data: Vec<f32> = floats.by_ref().take(n.value.numel()).collect();
        let t = Tensor::from_f32(n.value.shape().to_vec(), &data)?;
        if !t.is_finite() {
            return Err(bad(format!("non-finite values in {}", n.name)));
        }
        n.value = t;
    }
    Ok(model)
}

pub fn save_checkpoint(model: &Model, path: &Path) -> Result<()> {
    let bytes = encode(model)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Model> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}
