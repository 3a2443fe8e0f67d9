//! Checkpoints: `<name>` holds every tensor as little-endian `f32` in
//! parameter order; `<name>.json` describes shapes and provenance.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::model::AttentionMask;
use super::params::{ToyNetDims, ToyNetParams, PARAM_NAMES};
use super::ToyNet;
use crate::error::{Error, Result};

pub const CHECKPOINT_FORMAT: &str = "toynet-f32le-v1";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorShape {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format: String,
    pub dims: ToyNetDims,
    pub mask: AttentionMask,
    pub tensors: Vec<TensorShape>,
    pub seed: u64,
    pub steps: u64,
    /// Free-form provenance, e.g. the resolved run config.
    #[serde(default)]
    pub extra: serde_json::Value,
}

fn sidecar(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

pub fn save_checkpoint(path: &Path, net: &ToyNet, seed: u64, steps: u64, extra: serde_json::Value) -> Result<()> {
    let tensors = net
        .params
        .tensors()
        .iter()
        .zip(PARAM_NAMES)
        .map(|(m, name)| TensorShape { name: name.to_string(), rows: m.nrows(), cols: m.ncols() })
        .collect();
    let manifest =
        CheckpointManifest { format: CHECKPOINT_FORMAT.into(), dims: net.dims(), mask: net.mask, tensors, seed, steps, extra };
    let mut bytes = Vec::with_capacity(net.params.num_params() * 4);
    for v in net.params.to_flat() {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    fs::write(path, bytes)?;
    fs::write(sidecar(path), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(ToyNet, CheckpointManifest)> {
    let manifest: CheckpointManifest = serde_json::from_str(&fs::read_to_string(sidecar(path))?)?;
    if manifest.format != CHECKPOINT_FORMAT {
        return Err(Error::Format(format!("unknown checkpoint format {:?}", manifest.format)));
    }
    manifest.dims.validate()?;
    let mut params = ToyNetParams::zeros(manifest.dims);
    for ((m, name), shape) in params.tensors().iter().zip(PARAM_NAMES).zip(&manifest.tensors) {
        if shape.name != name || shape.rows != m.nrows() || shape.cols != m.ncols() {
            return Err(Error::Format(format!(
                "manifest tensor {} {}x{} does not match {} {}x{}",
                shape.name,
                shape.rows,
                shape.cols,
                name,
                m.nrows(),
                m.ncols()
            )));
        }
    }
    let bytes = fs::read(path)?;
    if bytes.len() != params.num_params() * 4 {
        return Err(Error::Format(format!(
            "checkpoint has {} bytes, expected {}",
            bytes.len(),
            params.num_params() * 4
        )));
    }
    let flat: Vec<f64> =
        bytes.chunks_exact(4).map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes")))).collect();
    params.set_flat(&flat)?;
    Ok((ToyNet::new(params, manifest.mask), manifest))
}
