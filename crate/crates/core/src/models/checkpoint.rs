//! Checkpoint files.
//!
//! Layout:
//!
//! ```text
//! b"KDAS1" | header length (u32, little-endian) | header (UTF-8 JSON) | payload
//! ```
//!
//! The payload holds every parameter as contiguous little-endian `f32`
//! values at the byte offsets recorded in the header. The header is fully
//! validated before any payload byte is interpreted.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use super::{ModelConfig, Param, ParameterSet, SegModel};

pub const MAGIC: &[u8; 5] = b"KDAS1";
const DTYPE: &str = "f32le";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("not a checkpoint: bad magic bytes")]
    BadMagic,
    #[error("corrupt manifest: {0}")]
    CorruptManifest(String),
    #[error("manifest shape of `{name}` does not match its byte length")]
    ShapeMismatch { name: String },
    #[error("payload region of `{name}` overlaps another parameter or leaves the payload")]
    OffsetOverlap { name: String },
    #[error("payload length mismatch: manifest declares {expected} bytes, file holds {actual}")]
    PayloadLength { expected: u64, actual: u64 },
    #[error("checkpoint does not describe a valid model: {0}")]
    Architecture(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub nbytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub dtype: String,
    pub model: ModelConfig,
    pub params: Vec<ParamEntry>,
    pub payload_bytes: u64,
    #[serde(default)]
    pub metadata: BTreeMap<String, serde_json::Value>,
}

/// A written checkpoint: its manifest and the SHA-256 of the file bytes.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub path: PathBuf,
    pub manifest: Manifest,
    pub digest: String,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CheckpointError + '_ {
    move |source| CheckpointError::Io { path: path.to_path_buf(), source }
}

/// SHA-256 of a file's bytes, hex encoded.
pub fn file_digest(path: &Path) -> Result<String, CheckpointError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

pub fn save_checkpoint(
    model: &SegModel,
    metadata: BTreeMap<String, serde_json::Value>,
    path: &Path,
) -> Result<Checkpoint, CheckpointError> {
    let mut entries = Vec::with_capacity(model.params().len());
    let mut payload = Vec::with_capacity(model.params().scalar_count() * 4);
    for (name, p) in model.params().iter() {
        let offset = payload.len() as u64;
        for v in &p.data {
            payload.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        entries.push(ParamEntry {
            name: name.to_string(),
            shape: p.shape().to_vec(),
            offset,
            nbytes: payload.len() as u64 - offset,
        });
    }
    let manifest = Manifest {
        dtype: DTYPE.into(),
        model: model.config().clone(),
        params: entries,
        payload_bytes: payload.len() as u64,
        metadata,
    };
    let header = serde_json::to_vec_pretty(&manifest).map_err(|e| CheckpointError::CorruptManifest(e.to_string()))?;
    let mut bytes = Vec::with_capacity(MAGIC.len() + 4 + header.len() + payload.len());
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&(header.len() as u32).to_le_bytes());
    bytes.extend_from_slice(&header);
    bytes.extend_from_slice(&payload);
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    fs::write(path, &bytes).map_err(io_err(path))?;
    Ok(Checkpoint { path: path.to_path_buf(), manifest, digest: hex::encode(Sha256::digest(&bytes)) })
}

/// Parses and validates only the manifest; returns it with the payload
/// start offset.
fn parse_manifest(bytes: &[u8]) -> Result<(Manifest, usize), CheckpointError> {
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let len_at = MAGIC.len();
    let header_len = bytes
        .get(len_at..len_at + 4)
        .map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize)
        .ok_or_else(|| CheckpointError::CorruptManifest("missing header length".into()))?;
    let start = len_at + 4;
    let header = bytes
        .get(start..start + header_len)
        .ok_or_else(|| CheckpointError::CorruptManifest("header extends past end of file".into()))?;
    let manifest: Manifest =
        serde_json::from_slice(header).map_err(|e| CheckpointError::CorruptManifest(e.to_string()))?;
    validate(&manifest)?;
    Ok((manifest, start + header_len))
}

fn validate(m: &Manifest) -> Result<(), CheckpointError> {
    if m.dtype != DTYPE {
        return Err(CheckpointError::CorruptManifest(format!("unsupported dtype {}", m.dtype)));
    }
    let mut regions: Vec<(u64, u64, &str)> = Vec::with_capacity(m.params.len());
    for e in &m.params {
        let elems: u64 = e.shape.iter().map(|&d| d as u64).product();
        if elems * 4 != e.nbytes {
            return Err(CheckpointError::ShapeMismatch { name: e.name.clone() });
        }
        regions.push((e.offset, e.offset + e.nbytes, &e.name));
    }
    regions.sort_unstable();
    let mut end = 0;
    for (lo, hi, name) in &regions {
        if *lo < end || *hi > m.payload_bytes {
            return Err(CheckpointError::OffsetOverlap { name: name.to_string() });
        }
        end = *hi;
    }
    let declared: u64 = m.params.iter().map(|e| e.nbytes).sum();
    if declared != m.payload_bytes {
        return Err(CheckpointError::PayloadLength { expected: m.payload_bytes, actual: declared });
    }
    Ok(())
}

/// Loads a model and its manifest.
pub fn load_checkpoint(path: &Path) -> Result<(SegModel, Manifest), CheckpointError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let (manifest, payload_start) = parse_manifest(&bytes)?;
    let payload = &bytes[payload_start..];
    if payload.len() as u64 != manifest.payload_bytes {
        return Err(CheckpointError::PayloadLength { expected: manifest.payload_bytes, actual: payload.len() as u64 });
    }
    let mut params = ParameterSet::default();
    for e in &manifest.params {
        let raw = &payload[e.offset as usize..(e.offset + e.nbytes) as usize];
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64).collect();
        params.insert(e.name.clone(), Param::new(e.shape.clone(), data));
    }
    let model = SegModel::from_parts(manifest.model.clone(), params)
        .map_err(|e| CheckpointError::Architecture(e.to_string()))?;
    Ok((model, manifest))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::build_model;

    fn saved() -> (tempfile::TempDir, PathBuf, SegModel) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.kdas");
        let model = build_model(&ModelConfig::student(32, 5)).unwrap();
        save_checkpoint(&model, BTreeMap::new(), &path).unwrap();
        (dir, path, model)
    }

    fn split(bytes: &[u8]) -> (Manifest, Vec<u8>) {
        let (m, start) = parse_manifest(bytes).unwrap();
        (m, bytes[start..].to_vec())
    }

    fn assemble(m: &Manifest, payload: &[u8]) -> Vec<u8> {
        let header = serde_json::to_vec(m).unwrap();
        let mut out = MAGIC.to_vec();
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(payload);
        out
    }

    #[test]
    fn roundtrip_is_bitwise() {
        let (_d, path, model) = saved();
        let (loaded, manifest) = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.params().digest(), model.params().digest());
        assert_eq!(manifest.payload_bytes as usize, model.params().scalar_count() * 4);
    }

    #[test]
    fn truncated_payload() {
        let (_d, path, _) = saved();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(CheckpointError::PayloadLength { .. })));
    }

    #[test]
    fn edited_shape_fails_validation() {
        let (_d, path, _) = saved();
        let (mut m, payload) = split(&fs::read(&path).unwrap());
        m.params[0].shape[0] += 1;
        fs::write(&path, assemble(&m, &payload)).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(CheckpointError::ShapeMismatch { .. })));
    }

    #[test]
    fn overlapping_offsets() {
        let (_d, path, _) = saved();
        let (mut m, payload) = split(&fs::read(&path).unwrap());
        m.params[1].offset = 0;
        fs::write(&path, assemble(&m, &payload)).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(CheckpointError::OffsetOverlap { .. })));
    }

    #[test]
    fn corrupt_header_and_magic() {
        let (_d, path, _) = saved();
        let mut bytes = fs::read(&path).unwrap();
        bytes[12] = b'#';
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(CheckpointError::CorruptManifest(_))));
        fs::write(&path, b"NOPE!....").unwrap();
        assert!(matches!(load_checkpoint(&path), Err(CheckpointError::BadMagic)));
        assert!(matches!(load_checkpoint(&path.with_extension("missing")), Err(CheckpointError::Io { .. })));
    }

    #[test]
    fn file_digest_is_stable() {
        let (_d, path, model) = saved();
        let first = file_digest(&path).unwrap();
        save_checkpoint(&model, BTreeMap::new(), &path).unwrap();
        assert_eq!(first, file_digest(&path).unwrap());
    }
}
