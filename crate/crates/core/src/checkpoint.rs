//! Parameter checkpoints.
//!
//! Layout: the 8-byte magic `TACOCKPT`, a little-endian `u64` header
//! length, a UTF-8 JSON header, then every tensor's values as little-endian
//! `f32` in header order. BatchNorm running statistics are stored as extra
//! tensors named `buffer:{layer}.running_mean` / `.running_var`.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::ParameterSet;
use crate::encoder::Buffers;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelState};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"TACOCKPT";
pub const FORMAT_VERSION: u32 = 1;
pub const HEAD_MERGE: &str = "sum_of_per_head_output_projections";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub config_digest: String,
    pub head_merge: String,
    pub epoch: Option<usize>,
    pub model: Option<ModelConfig>,
    pub tensors: Vec<TensorEntry>,
}

const MEAN: &str = ".running_mean";
const VAR: &str = ".running_var";

fn entries(state: &ModelState<f64>) -> Vec<(String, Vec<usize>, Vec<f64>)> {
    let mut out: Vec<_> = state
        .params
        .iter()
        .map(|(k, t)| (k.clone(), t.shape().to_vec(), t.data().to_vec()))
        .collect();
    for (k, (m, v)) in &state.buffers {
        out.push((format!("buffer:{k}{MEAN}"), vec![m.len()], m.clone()));
        out.push((format!("buffer:{k}{VAR}"), vec![v.len()], v.clone()));
    }
    out
}

pub fn encode(state: &ModelState<f64>, digest: &str, model: Option<&ModelConfig>, epoch: Option<usize>) -> Result<Vec<u8>> {
    let items = entries(state);
    let header = CheckpointHeader {
        format_version: FORMAT_VERSION,
        config_digest: digest.to_string(),
        head_merge: HEAD_MERGE.to_string(),
        epoch,
        model: model.cloned(),
        tensors: items
            .iter()
            .map(|(name, shape, _)| TensorEntry {
                name: name.clone(),
                shape: shape.clone(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(16 + json.len() + 4 * items.iter().map(|i| i.2.len()).sum::<usize>());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, _, data) in &items {
        for v in data {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<(CheckpointHeader, ModelState<f64>)> {
    let bad = |m: &str| Error::Checkpoint(m.to_string());
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint (bad magic)"));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = bytes.get(16..16 + hlen).ok_or_else(|| bad("truncated header"))?;
    let header: CheckpointHeader = serde_json::from_slice(body)?;
    if header.format_version != FORMAT_VERSION {
        return Err(bad(&format!("unsupported format version {}", header.format_version)));
    }
    let mut payload = &bytes[16 + hlen..];
    let mut params = ParameterSet::new();
    let mut buffers = Buffers::new();
    for e in &header.tensors {
        let n: usize = e.shape.iter().product();
        if payload.len() < 4 * n {
            return Err(bad(&format!("payload truncated at tensor {}", e.name)));
        }
        let data: Vec<f64> = payload[..4 * n]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
        payload = &payload[4 * n..];
        if let Some(rest) = e.name.strip_prefix("buffer:") {
            let (layer, is_mean) = if let Some(l) = rest.strip_suffix(MEAN) {
                (l, true)
            } else if let Some(l) = rest.strip_suffix(VAR) {
                (l, false)
            } else {
                return Err(bad(&format!("unknown buffer {rest}")));
            };
            let slot = buffers.entry(layer.to_string()).or_default();
            if is_mean {
                slot.0 = data;
            } else {
                slot.1 = data;
            }
        } else {
            params.insert(e.name.clone(), Tensor::new(e.shape.clone(), data))?;
        }
    }
    if !payload.is_empty() {
        return Err(bad("trailing bytes after payload"));
    }
    Ok((header, ModelState { params, buffers }))
}

pub fn save(
    path: &Path,
    state: &ModelState<f64>,
    digest: &str,
    model: Option<&ModelConfig>,
    epoch: Option<usize>,
) -> Result<()> {
    let bytes = encode(state, digest, model, epoch)?;
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<(CheckpointHeader, ModelState<f64>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}
