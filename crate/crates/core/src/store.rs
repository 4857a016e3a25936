//! Named-tensor container files.
//!
//! ```text
//! "LPRT" | version u32 | manifest length u32 | manifest (JSON) | f32 payload
//! ```
//!
//! All integers and floats are little-endian. The manifest lists every
//! tensor's name, shape, dtype and element offset into the payload, plus
//! free-form metadata.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::models::{InitProvenance, NamedTensor, StageModelSpec, StageWeights};

pub const MAGIC: &[u8; 4] = b"LPRT";
pub const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    offset: usize,
    len: usize,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    metadata: Value,
    tensors: Vec<Entry>,
}

pub fn encode_tensors(metadata: &Value, tensors: &BTreeMap<String, NamedTensor>) -> Vec<u8> {
    let mut offset = 0;
    let entries = tensors
        .iter()
        .map(|(name, t)| {
            let e = Entry { name: name.clone(), shape: t.shape.clone(), dtype: "f32".into(), offset, len: t.data.len() };
            offset += t.data.len();
            e
        })
        .collect();
    let manifest = serde_json::to_vec(&Manifest { metadata: metadata.clone(), tensors: entries }).expect("manifest serializes");
    let mut out = Vec::with_capacity(12 + manifest.len() + 4 * offset);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(manifest.len() as u32).to_le_bytes());
    out.extend_from_slice(&manifest);
    for t in tensors.values() {
        for v in &t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode_tensors(bytes: &[u8], label: &str) -> Result<(Value, BTreeMap<String, NamedTensor>)> {
    let fail = |offset: usize, reason: String| Error::Format { path: label.to_string(), offset: offset as u64, reason };
    if bytes.len() < 12 || &bytes[..4] != MAGIC {
        return Err(fail(0, "bad magic, expected LPRT".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(fail(4, format!("unsupported version {version}")));
    }
    let len = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let body = bytes.get(12..12 + len).ok_or_else(|| fail(8, format!("manifest length {len} exceeds file")))?;
    let manifest: Manifest = serde_json::from_slice(body).map_err(|e| fail(12, format!("manifest: {e}")))?;
    let payload = &bytes[12 + len..];
    let total: usize = manifest.tensors.iter().map(|e| e.len).sum();
    if payload.len() != 4 * total {
        return Err(fail(12 + len, format!("payload holds {} bytes, manifest needs {}", payload.len(), 4 * total)));
    }
    let mut tensors = BTreeMap::new();
    for e in manifest.tensors {
        if e.dtype != "f32" || e.shape.iter().product::<usize>() != e.len || e.offset + e.len > total {
            return Err(fail(12, format!("bad entry for tensor {}", e.name)));
        }
        let raw = &payload[4 * e.offset..4 * (e.offset + e.len)];
        let data = raw.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes"))).collect();
        tensors.insert(e.name, NamedTensor { shape: e.shape, data });
    }
    Ok((manifest.metadata, tensors))
}

pub fn write_tensors(path: &Path, metadata: &Value, tensors: &BTreeMap<String, NamedTensor>) -> Result<()> {
    write_atomic(path, &encode_tensors(metadata, tensors))
}

pub fn read_tensors(path: &Path) -> Result<(Value, BTreeMap<String, NamedTensor>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_tensors(&bytes, &path.display().to_string())
}

/// Writes through a temporary sibling so readers never see a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

#[derive(Serialize, Deserialize)]
struct WeightsMeta {
    kind: String,
    stage: usize,
    spec: StageModelSpec,
    provenance: InitProvenance,
    config_hash: String,
}

pub fn save_weights(path: &Path, weights: &StageWeights, config_hash: &str) -> Result<()> {
    let meta = WeightsMeta {
        kind: "stage_weights".into(),
        stage: weights.spec.stage,
        spec: weights.spec.clone(),
        provenance: weights.provenance.clone(),
        config_hash: config_hash.into(),
    };
    write_tensors(path, &serde_json::to_value(meta).expect("metadata serializes"), &weights.tensors)
}

/// Returns the weights and the config hash recorded with them.
pub fn load_weights(path: &Path) -> Result<(StageWeights, String)> {
    let (meta, tensors) = read_tensors(path)?;
    let meta: WeightsMeta = serde_json::from_value(meta).map_err(|e| Error::Format {
        path: path.display().to_string(),
        offset: 12,
        reason: format!("weights metadata: {e}"),
    })?;
    let weights = StageWeights { spec: meta.spec, provenance: meta.provenance, tensors };
    weights.validate()?;
    Ok((weights, meta.config_hash))
}
