//! Checkpoint container.
//!
//! ```text
//! b"IFLAMECK"            8 bytes
//! format version         u32 LE
//! header length          u64 LE
//! header                 UTF-8 TOML
//! blob                   f32 LE arrays, row-major, back to back
//! ```
//!
//! The header holds `format_version`, `config_version`, the training `step`,
//! a `[config]` table with every model hyperparameter by name, and one
//! `[[manifest]]` entry per array with its `name`, `dtype`, `rows`, `cols`
//! and byte `offset` into the blob.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::hourglass::{ModelConfig, ModelWeights};
use crate::{Error, Real, Result};

pub const MAGIC: &[u8; 8] = b"IFLAMECK";
pub const FORMAT_VERSION: u32 = 1;
pub const CONFIG_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub dtype: String,
    pub rows: usize,
    pub cols: usize,
    pub offset: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub format_version: u32,
    pub config_version: u32,
    pub step: u64,
    pub config: ModelConfig,
    pub manifest: Vec<ManifestEntry>,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

pub fn to_bytes<T: Real>(weights: &ModelWeights<T>, step: u64) -> Result<Vec<u8>> {
    let mut manifest = Vec::new();
    let mut blob = Vec::with_capacity(4 * weights.param_count());
    for p in weights.store.iter() {
        let (rows, cols) = p.value.dim();
        manifest.push(ManifestEntry {
            name: p.name.clone(),
            dtype: "f32".into(),
            rows,
            cols,
            offset: blob.len() as u64,
        });
        for &v in p.value.iter() {
            blob.extend_from_slice(&(v.to_f64_lossy() as f32).to_le_bytes());
        }
    }
    let header = Header {
        format_version: FORMAT_VERSION,
        config_version: CONFIG_VERSION,
        step,
        config: weights.config.clone(),
        manifest,
    };
    let text = toml::to_string(&header).map_err(|e| bad(format!("cannot encode header: {e}")))?;
    let mut out = Vec::with_capacity(20 + text.len() + blob.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(text.len() as u64).to_le_bytes());
    out.extend_from_slice(text.as_bytes());
    out.extend_from_slice(&blob);
    Ok(out)
}

/// Parses the header without decoding weights.
pub fn read_header(bytes: &[u8]) -> Result<(Header, &[u8])> {
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(bad("not an iflame checkpoint (bad magic)"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(bad(format!("unsupported format version {version}")));
    }
    let len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let end = 20usize.checked_add(len).filter(|&e| e <= bytes.len()).ok_or_else(|| bad("truncated header"))?;
    let text = std::str::from_utf8(&bytes[20..end]).map_err(|_| bad("header is not UTF-8"))?;
    let header: Header = toml::from_str(text).map_err(|e| bad(format!("bad header: {e}")))?;
    if header.config_version != CONFIG_VERSION {
        return Err(bad(format!("unsupported config version {}", header.config_version)));
    }
    Ok((header, &bytes[end..]))
}

pub fn from_bytes<T: Real>(bytes: &[u8]) -> Result<(ModelWeights<T>, u64)> {
    let (header, blob) = read_header(bytes)?;
    let mut weights = ModelWeights::<T>::random(&header.config, 0)?;
    if header.manifest.len() != weights.store.len() {
        return Err(bad(format!(
            "manifest lists {} arrays, config needs {}",
            header.manifest.len(),
            weights.store.len()
        )));
    }
    for entry in &header.manifest {
        if entry.dtype != "f32" {
            return Err(bad(format!("{}: unsupported dtype {}", entry.name, entry.dtype)));
        }
        let id = weights
            .store
            .find(&entry.name)
            .ok_or_else(|| bad(format!("unexpected array {}", entry.name)))?;
        let target = weights.store.get_mut(id);
        if target.dim() != (entry.rows, entry.cols) {
            return Err(bad(format!(
                "{}: shape {}x{}, expected {:?}",
                entry.name, entry.rows, entry.cols,
                target.dim()
            )));
        }
        let start = entry.offset as usize;
        let end = start + 4 * entry.rows * entry.cols;
        let data = blob.get(start..end).ok_or_else(|| bad(format!("{}: data out of bounds", entry.name)))?;
        for (dst, chunk) in target.iter_mut().zip(data.chunks_exact(4)) {
            *dst = T::lit(f32::from_le_bytes(chunk.try_into().expect("4 bytes")) as f64);
        }
    }
    Ok((weights, header.step))
}

pub fn save<T: Real>(path: impl AsRef<Path>, weights: &ModelWeights<T>, step: u64) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, to_bytes(weights, step)?).map_err(|e| Error::io(path, e))
}

pub fn load<T: Real>(path: impl AsRef<Path>) -> Result<(ModelWeights<T>, u64)> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}
