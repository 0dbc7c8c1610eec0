//! Binary checkpoint container: `SFD1` magic, a little-endian u32 header
//! length, a JSON header describing the network and tensor shapes, then the
//! parameters as little-endian f32 in header order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::policy::{NetConfig, ParamTensor, PolicyError, PolicyNet};

pub const MAGIC: &[u8; 4] = b"SFD1";

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("checkpoint truncated: {0}")]
    Truncated(String),
    #[error("checkpoint header: {0}")]
    Header(#[from] serde_json::Error),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    config: NetConfig,
    tensors: Vec<TensorEntry>,
}

/// Serialises a network. Parameters are stored as f32; a network whose
/// parameters are already f32-representable survives a round trip exactly.
pub fn to_bytes(net: &PolicyNet) -> Result<Vec<u8>, CheckpointError> {
    let header = Header {
        config: net.config().clone(),
        tensors: net.params().iter().map(|t| TensorEntry { name: t.name.clone(), shape: t.shape.clone() }).collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(8 + json.len() + 4 * net.param_count());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for t in net.params() {
        for &v in &t.data {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

pub fn from_bytes(bytes: &[u8]) -> Result<PolicyNet, CheckpointError> {
    if bytes.len() < 8 || &bytes[..4] != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let hlen = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
    let json = bytes.get(8..8 + hlen).ok_or_else(|| CheckpointError::Truncated("header".into()))?;
    let header: Header = serde_json::from_slice(json)?;
    let mut body = &bytes[8 + hlen..];
    let mut params = Vec::with_capacity(header.tensors.len());
    for entry in header.tensors {
        let n: usize = entry.shape.iter().product();
        if body.len() < 4 * n {
            return Err(CheckpointError::Truncated(entry.name));
        }
        let data = body[..4 * n]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
        body = &body[4 * n..];
        params.push(ParamTensor { name: entry.name, shape: entry.shape, data });
    }
    if !body.is_empty() {
        return Err(CheckpointError::Truncated(format!("{} trailing bytes", body.len())));
    }
    Ok(PolicyNet::from_parts(header.config, params)?)
}

pub fn save(net: &PolicyNet, path: &Path) -> Result<(), CheckpointError> {
    fs::write(path, to_bytes(net)?)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<PolicyNet, CheckpointError> {
    from_bytes(&fs::read(path)?)
}
