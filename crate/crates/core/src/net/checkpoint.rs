//! Single-file checkpoints.
//!
//! Layout: the 8-byte magic `FCRSEG1\n`, a little-endian `u64` header length,
//! a JSON header (config, epoch, parameter names and shapes), then every
//! parameter as little-endian `f32` in header order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelState, NetConfig, Param};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"FCRSEG1\n";

#[derive(Serialize, Deserialize)]
struct Header {
    config: NetConfig,
    epoch: usize,
    params: Vec<(String, Vec<usize>)>,
}

pub fn save_checkpoint(path: &Path, m: &ModelState) -> Result<()> {
    let header = Header {
        config: m.config.clone(),
        epoch: m.epoch,
        params: m.params.iter().map(|p| (p.name.clone(), p.shape.clone())).collect(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let mut buf = Vec::with_capacity(16 + json.len() + 4 * m.num_parameters());
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&json);
    for p in &m.params {
        for v in &p.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    // write-then-rename so a crash never leaves a truncated checkpoint
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, &buf).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<ModelState> {
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    if buf.len() < 16 || &buf[..8] != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint(format!(
            "{}: not a FCRSEG1 checkpoint",
            path.display()
        )));
    }
    let hlen = u64::from_le_bytes(buf[8..16].try_into().expect("8 bytes")) as usize;
    let body = buf
        .get(16..16 + hlen)
        .ok_or_else(|| Error::Checkpoint("truncated header".into()))?;
    let header: Header = serde_json::from_slice(body).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let mut offset = 16 + hlen;
    let mut params = Vec::with_capacity(header.params.len());
    for (name, shape) in header.params {
        let n: usize = shape.iter().product();
        let bytes = buf
            .get(offset..offset + 4 * n)
            .ok_or_else(|| Error::Checkpoint(format!("truncated data for {name}")))?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        offset += 4 * n;
        params.push(Param { name, shape, data });
    }
    if offset != buf.len() {
        return Err(Error::Checkpoint("trailing bytes after parameters".into()));
    }
    ModelState::from_parts(header.config, params, header.epoch)
}
