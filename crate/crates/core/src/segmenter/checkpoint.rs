//! Model checkpoints: one JSON header line, then the parameters as
//! little-endian f64.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::conv::{ConvArch, ConvModel};
use super::Segmenter;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub architecture: ConvArch,
    pub seed: u64,
    pub epoch: usize,
    pub smoothness_weight: f64,
    pub n_params: usize,
}

pub fn write_checkpoint(
    model: &ConvModel,
    seed: u64,
    epoch: usize,
    smoothness_weight: f64,
    path: impl AsRef<Path>,
) -> Result<()> {
    let header = CheckpointHeader {
        architecture: model.arch().clone(),
        seed,
        epoch,
        smoothness_weight,
        n_params: model.params().len(),
    };
    let mut bytes = serde_json::to_vec(&header)?;
    bytes.push(b'\n');
    for p in model.params() {
        bytes.extend_from_slice(&p.to_le_bytes());
    }
    fs::write(path, bytes)?;
    Ok(())
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<(ConvModel, CheckpointHeader)> {
    let bytes = fs::read(path)?;
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Format("checkpoint has no header line".into()))?;
    let header: CheckpointHeader = serde_json::from_slice(&bytes[..nl])
        .map_err(|e| Error::Format(format!("malformed checkpoint header: {e}")))?;
    let payload = &bytes[nl + 1..];
    if payload.len() != header.n_params * 8 || header.n_params != header.architecture.n_params() {
        return Err(Error::Format(format!(
            "checkpoint payload has {} bytes for {} parameters",
            payload.len(),
            header.n_params
        )));
    }
    let params = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    Ok((ConvModel::from_params(header.architecture.clone(), params)?, header))
}
