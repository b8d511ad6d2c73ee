//! Checkpoint layout (little endian):
//!
//! ```text
//! magic    8 bytes  "REFNETv1"
//! hlen     u64      header length in bytes
//! header   hlen     UTF-8 JSON: version, config, step, tensor manifest
//! payload           raw f32 values, at the manifest's byte offsets
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ParamStore, RefConfig, RefNet};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"REFNETv1";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    version: u32,
    config: RefConfig,
    step: u64,
    tensors: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    trainable: bool,
    /// Byte offset into the payload.
    offset: u64,
    /// Byte length.
    len: u64,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub net: RefNet,
    pub step: u64,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut tensors = Vec::new();
        let mut payload = Vec::new();
        for (name, t, trainable) in self.net.params().iter() {
            let offset = payload.len() as u64;
            for v in t.data() {
                payload.extend_from_slice(&v.to_le_bytes());
            }
            tensors.push(TensorEntry {
                name: name.to_string(),
                shape: t.shape().to_vec(),
                trainable,
                offset,
                len: payload.len() as u64 - offset,
            });
        }
        let header = serde_json::to_vec(&Header {
            version: CHECKPOINT_VERSION,
            config: self.net.config().clone(),
            step: self.step,
            tensors,
        })?;
        let mut out = Vec::with_capacity(16 + header.len() + payload.len());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint(format!(
                "bad magic: expected {:?}, found {:?}",
                String::from_utf8_lossy(CHECKPOINT_MAGIC),
                String::from_utf8_lossy(&bytes[..bytes.len().min(8)])
            )));
        }
        let truncated = |what: &str| Error::Checkpoint(format!("truncated file ({what})"));
        let hlen = bytes.get(8..16).ok_or_else(|| truncated("header length"))?;
        let hlen = u64::from_le_bytes(hlen.try_into().expect("8 bytes")) as usize;
        let header_end = 16usize
            .checked_add(hlen)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| truncated("header"))?;
        let header: Header = serde_json::from_slice(&bytes[16..header_end])
            .map_err(|e| Error::Checkpoint(format!("malformed header: {e}")))?;
        if header.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unknown checkpoint version {} (supported: {CHECKPOINT_VERSION})",
                header.version
            )));
        }
        let payload = &bytes[header_end..];
        let mut store = ParamStore::new();
        for e in &header.tensors {
            let numel: usize = e.shape.iter().product();
            if e.len as usize != numel * 4 {
                return Err(Error::Checkpoint(format!(
                    "tensor {} declares {} bytes for shape {:?}",
                    e.name, e.len, e.shape
                )));
            }
            let raw = payload
                .get(e.offset as usize..(e.offset + e.len) as usize)
                .ok_or_else(|| truncated(&format!("tensor {}", e.name)))?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            store.insert(
                e.name.clone(),
                Tensor::new(e.shape.clone(), data)?,
                e.trainable,
            )?;
        }
        let net = RefNet::from_params(header.config, store)?;
        Ok(Self {
            net,
            step: header.step,
        })
    }
}

pub fn save_checkpoint(net: &RefNet, step: u64, path: &Path) -> Result<()> {
    let bytes = Checkpoint {
        net: net.clone(),
        step,
    }
    .to_bytes()?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Loads a checkpoint; with `expected_group`, rejects a different group order.
pub fn load_checkpoint(path: &Path, expected_group: Option<usize>) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let ckpt = Checkpoint::from_bytes(&bytes)?;
    if let Some(n) = expected_group {
        let found = ckpt.net.config().group_order;
        if found != n {
            return Err(Error::Checkpoint(format!(
                "group mismatch: checkpoint was trained for C_{found}, C_{n} requested"
            )));
        }
    }
    Ok(ckpt)
}
