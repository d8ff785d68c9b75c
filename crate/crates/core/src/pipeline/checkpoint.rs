use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{Device, Tensor};
use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::train::RunRecord;
use crate::error::{Error, Result};
use crate::uncertainty::LossWeights;

pub const FORMAT_VERSION: u32 = 1;
const META_KEY: &str = "graphseg";

/// Everything besides tensors needed to rebuild and resume a run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub config: RunConfig,
    pub epochs_done: usize,
    pub adam_steps: usize,
    pub weights: LossWeights,
    pub record: RunRecord,
}

/// Writes `tensors` as safetensors with `meta` as JSON in the header.
pub fn save_checkpoint(
    path: &Path,
    meta: &CheckpointMeta,
    tensors: &BTreeMap<String, Tensor>,
) -> Result<()> {
    let mut header = HashMap::new();
    header.insert(META_KEY.to_string(), serde_json::to_string(meta)?);
    let contiguous: Vec<(String, Tensor)> = tensors
        .iter()
        .map(|(k, t)| Ok((k.clone(), t.contiguous()?)))
        .collect::<Result<_>>()?;
    safetensors::serialize_to_file(contiguous, Some(header), path)
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))
}

pub fn load_checkpoint(path: &Path) -> Result<(CheckpointMeta, BTreeMap<String, Tensor>)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let (_, header) = safetensors::SafeTensors::read_metadata(&bytes)
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    let raw = header
        .metadata()
        .as_ref()
        .and_then(|m| m.get(META_KEY))
        .ok_or_else(|| Error::Checkpoint(format!("{} carries no run metadata", path.display())))?;
    let probe: serde_json::Value = serde_json::from_str(raw)?;
    let version = probe.get("format_version").and_then(|v| v.as_u64());
    if version != Some(FORMAT_VERSION as u64) {
        return Err(Error::Checkpoint(format!(
            "{} has format version {version:?}, expected {FORMAT_VERSION}",
            path.display()
        )));
    }
    let meta: CheckpointMeta = serde_json::from_value(probe)?;
    let tensors = candle_core::safetensors::load_buffer(&bytes, &Device::Cpu)?;
    Ok((meta, tensors.into_iter().collect()))
}
