//! Shared container for model checkpoints.
//!
//! Layout, all little-endian: 4-byte magic, `u16` version, `u32` config
//! words, `u64` parameter count, that many `f32` values, then a `u64`
//! FNV-1a hash of every preceding byte.

use std::hash::Hasher;
use std::path::Path;

use edgegrasp_tensor::ParamStore;
use fnv::FnvHasher;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic {found:?}, expected {expected:?}")]
    BadMagic { found: Vec<u8>, expected: [u8; 4] },
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u16),
    #[error("truncated checkpoint: need {needed} bytes, have {actual}")]
    Truncated { needed: usize, actual: usize },
    #[error("{0} unexpected trailing bytes")]
    TrailingBytes(usize),
    #[error("content hash mismatch: stored {stored:#018x}, computed {computed:#018x}")]
    HashMismatch { stored: u64, computed: u64 },
    #[error("invalid stored configuration: {0}")]
    InvalidConfig(String),
    #[error("configuration implies {expected} parameters but the file holds {found}")]
    ParamCountMismatch { expected: usize, found: usize },
}

pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h = FnvHasher::default();
    h.write(bytes);
    h.finish()
}

pub fn encode(magic: [u8; 4], version: u16, config: &[u32], stores: &[&ParamStore]) -> Vec<u8> {
    let count: usize = stores.iter().map(|s| s.numel()).sum();
    let mut out = Vec::with_capacity(6 + 4 * config.len() + 8 + 4 * count + 8);
    out.extend_from_slice(&magic);
    out.extend_from_slice(&version.to_le_bytes());
    for w in config {
        out.extend_from_slice(&w.to_le_bytes());
    }
    out.extend_from_slice(&(count as u64).to_le_bytes());
    for v in stores.iter().flat_map(|s| s.flat()) {
        out.extend_from_slice(&v.to_le_bytes());
    }
    let hash = fnv1a(&out);
    out.extend_from_slice(&hash.to_le_bytes());
    out
}

pub struct Decoded {
    pub config: Vec<u32>,
    pub values: Vec<f32>,
}

fn need(bytes: &[u8], needed: usize) -> Result<(), CheckpointError> {
    if bytes.len() < needed {
        return Err(CheckpointError::Truncated {
            needed,
            actual: bytes.len(),
        });
    }
    Ok(())
}

pub fn decode(bytes: &[u8], magic: [u8; 4], version: u16, config_words: usize) -> Result<Decoded, CheckpointError> {
    need(bytes, 4)?;
    if bytes[..4] != magic {
        return Err(CheckpointError::BadMagic {
            found: bytes[..4].to_vec(),
            expected: magic,
        });
    }
    need(bytes, 6)?;
    let found_version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if found_version != version {
        return Err(CheckpointError::UnsupportedVersion(found_version));
    }
    let count_at = 6 + 4 * config_words;
    need(bytes, count_at + 8)?;
    let config = bytes[6..count_at]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let count = u64::from_le_bytes(bytes[count_at..count_at + 8].try_into().unwrap());
    let body_at = count_at + 8;
    let needed = usize::try_from(count)
        .ok()
        .and_then(|c| c.checked_mul(4))
        .and_then(|b| b.checked_add(body_at + 8))
        .unwrap_or(usize::MAX);
    need(bytes, needed)?;
    if bytes.len() > needed {
        return Err(CheckpointError::TrailingBytes(bytes.len() - needed));
    }
    let hash_at = needed - 8;
    let stored = u64::from_le_bytes(bytes[hash_at..].try_into().unwrap());
    let computed = fnv1a(&bytes[..hash_at]);
    if stored != computed {
        return Err(CheckpointError::HashMismatch { stored, computed });
    }
    let values = bytes[body_at..hash_at]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(Decoded { config, values })
}

/// Copies `values` into the stores in declaration order.
pub fn fill(stores: &mut [&mut ParamStore], values: &[f32]) -> Result<(), CheckpointError> {
    let expected: usize = stores.iter().map(|s| s.numel()).sum();
    if expected != values.len() {
        return Err(CheckpointError::ParamCountMismatch {
            expected,
            found: values.len(),
        });
    }
    let mut at = 0;
    for store in stores.iter_mut() {
        for t in store.tensors_mut() {
            let n = t.len();
            t.data_mut().copy_from_slice(&values[at..at + n]);
            at += n;
        }
    }
    Ok(())
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CheckpointError> {
    Ok(std::fs::write(path, bytes)?)
}

pub fn read_file(path: &Path) -> Result<Vec<u8>, CheckpointError> {
    Ok(std::fs::read(path)?)
}
