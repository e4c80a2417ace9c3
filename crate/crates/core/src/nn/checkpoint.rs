//! Model checkpoints: one line of JSON header followed by the flat
//! parameters as little-endian `f32`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Activation, Architecture, ModelParams};
use crate::{Error, Result};

/// Where a checkpointed model came from.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Lineage {
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub round: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub client: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub layer_sizes: Vec<usize>,
    pub activation: Activation,
    pub param_count: usize,
    pub lineage: Lineage,
}

pub fn encode(model: &ModelParams, lineage: &Lineage) -> Result<Vec<u8>> {
    let arch = model.architecture();
    let header = CheckpointHeader {
        layer_sizes: arch.layer_sizes.clone(),
        activation: arch.activation,
        param_count: model.num_params(),
        lineage: lineage.clone(),
    };
    let mut out = serde_json::to_vec(&header)?;
    out.push(b'\n');
    out.reserve(model.num_params() * 4);
    for &p in model.as_slice() {
        out.extend_from_slice(&(p as f32).to_le_bytes());
    }
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> std::result::Result<(ModelParams, Lineage), String> {
    let newline = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or("missing header terminator")?;
    let header: CheckpointHeader =
        serde_json::from_slice(&bytes[..newline]).map_err(|e| format!("bad header: {e}"))?;
    let arch =
        Architecture::new(header.layer_sizes, header.activation).map_err(|e| e.to_string())?;
    if arch.num_params() != header.param_count {
        return Err(format!(
            "header param_count {} disagrees with layer sizes ({})",
            header.param_count,
            arch.num_params()
        ));
    }
    let body = &bytes[newline + 1..];
    if body.len() != header.param_count * 4 {
        return Err(format!(
            "expected {} parameter bytes, found {}",
            header.param_count * 4,
            body.len()
        ));
    }
    let params = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    let model = ModelParams::from_flat(arch, params).map_err(|e| e.to_string())?;
    Ok((model, header.lineage))
}

pub fn save(path: &Path, model: &ModelParams, lineage: &Lineage) -> Result<()> {
    let bytes = encode(model, lineage)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<(ModelParams, Lineage)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|msg| Error::Checkpoint {
        path: path.to_path_buf(),
        msg,
    })
}
