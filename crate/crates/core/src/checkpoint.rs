//! Binary checkpoint files.
//!
//! Layout: the 8-byte magic `MFCKPT\0\0`, a little-endian `u64` header
//! length, a UTF-8 JSON header, then every parameter as little-endian `f64`
//! values, concatenated in manifest order. The header records the format
//! version, the resolved model configuration and, per parameter, its path,
//! shape and byte offset into the payload.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::Model;
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"MFCKPT\0\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub path: String,
    pub shape: Vec<usize>,
    /// Byte offset of the first value within the payload.
    pub offset: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Header {
    pub format_version: u32,
    pub config: ModelConfig,
    pub manifest: Vec<ManifestEntry>,
}

pub fn encode(model: &Model) -> Result<Vec<u8>> {
    let mut manifest = Vec::with_capacity(model.params.len());
    let mut payload = Vec::with_capacity(model.params.num_scalars() * 8);
    for (path, t) in model.params.iter() {
        manifest.push(ManifestEntry {
            path: path.to_string(),
            shape: t.shape().to_vec(),
            offset: payload.len() as u64,
        });
        for v in t.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    let header = Header {
        format_version: FORMAT_VERSION,
        config: model.config.clone(),
        manifest,
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::Json {
        context: "checkpoint header".into(),
        source: e,
    })?;
    let mut out = Vec::with_capacity(16 + json.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&payload);
    Ok(out)
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<Model> {
    let bad = |detail: String| Error::Format {
        path: path.to_path_buf(),
        detail,
    };
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint file (bad magic)".into()));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let header_bytes = bytes
        .get(16..16usize.saturating_add(header_len))
        .ok_or_else(|| bad("truncated header".into()))?;
    let header: Header = serde_json::from_slice(header_bytes).map_err(|e| Error::Json {
        context: format!("{}: checkpoint header", path.display()),
        source: e,
    })?;
    if header.format_version != FORMAT_VERSION {
        return Err(bad(format!(
            "unsupported checkpoint version {} (expected {FORMAT_VERSION})",
            header.format_version
        )));
    }
    let payload = &bytes[16 + header_len..];
    let mut params = ParamStore::new();
    let mut expected_offset = 0u64;
    for entry in &header.manifest {
        if entry.offset != expected_offset {
            return Err(bad(format!(
                "`{}`: offset {} but previous entries end at {expected_offset}",
                entry.path, entry.offset
            )));
        }
        let n: usize = entry.shape.iter().product();
        let start = entry.offset as usize;
        let raw = payload
            .get(start..start + n * 8)
            .ok_or_else(|| bad(format!("payload too short for `{}`", entry.path)))?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        params.insert(entry.path.clone(), Tensor::new(entry.shape.clone(), data)?)?;
        expected_offset += (n * 8) as u64;
    }
    if payload.len() as u64 != expected_offset {
        return Err(bad(format!(
            "payload has {} bytes, manifest describes {expected_offset}",
            payload.len()
        )));
    }
    Model::from_parts(header.config, params)
}

pub fn save(path: &Path, model: &Model) -> Result<()> {
    std::fs::write(path, encode(model)?).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Model> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}
