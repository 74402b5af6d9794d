//! Single-file checkpoint container.
//!
//! Layout:
//!
//! ```text
//! magic    8 bytes  "SFUDACKP"
//! version  u32 LE   currently 1
//! hlen     u32 LE   length of the JSON header in bytes
//! header   hlen     {"arch", "step_count", "dtype", "params": [{"name","shape"}], "payload_sha256"}
//! payload           every parameter as little-endian f32, in header order
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::models::{ArchSpec, ModelState, Param, Params};
use crate::scalar::Scalar;

const MAGIC: &[u8; 8] = b"SFUDACKP";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    arch: ArchSpec,
    step_count: u64,
    dtype: String,
    params: Vec<ParamEntry>,
    payload_sha256: String,
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn to_bytes<T: Scalar>(model: &ModelState<T>) -> Vec<u8> {
    let mut payload = Vec::with_capacity(model.params.numel() * 4);
    for p in model.params.iter() {
        for &v in &p.data {
            payload.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
    }
    let header = Header {
        arch: model.arch.clone(),
        step_count: model.step_count,
        dtype: "f32le".into(),
        params: model.params.iter().map(|p| ParamEntry { name: p.name.clone(), shape: p.shape.clone() }).collect(),
        payload_sha256: hex(&Sha256::digest(&payload)),
    };
    let header = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(16 + header.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&payload);
    out
}

pub fn from_bytes<T: Scalar>(bytes: &[u8]) -> Result<ModelState<T>> {
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(Error::Parse("not a checkpoint file (bad magic)".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::Parse(format!("unsupported checkpoint version {version}")));
    }
    let hlen = u32::from_le_bytes(bytes[12..16].try_into().expect("4 bytes")) as usize;
    let header_bytes = bytes
        .get(16..16 + hlen)
        .ok_or_else(|| Error::Parse("truncated checkpoint header".into()))?;
    let header: Header =
        serde_json::from_slice(header_bytes).map_err(|e| Error::Parse(format!("checkpoint header: {e}")))?;
    if header.dtype != "f32le" {
        return Err(Error::Parse(format!("unsupported payload dtype {}", header.dtype)));
    }
    header.arch.validate().map_err(|e| Error::Parse(format!("checkpoint architecture: {e}")))?;
    let expected = header.arch.param_layout();
    let stored: Vec<(String, Vec<usize>)> = header.params.iter().map(|p| (p.name.clone(), p.shape.clone())).collect();
    if expected != stored {
        return Err(Error::Parse("parameter table does not match the embedded architecture".into()));
    }
    let payload = &bytes[16 + hlen..];
    let total: usize = stored.iter().map(|(_, s)| s.iter().product::<usize>()).sum();
    if payload.len() != total * 4 {
        return Err(Error::Parse(format!("payload has {} bytes, expected {}", payload.len(), total * 4)));
    }
    if hex(&Sha256::digest(payload)) != header.payload_sha256 {
        return Err(Error::Parse("payload checksum mismatch".into()));
    }
    let mut offset = 0;
    let params = stored
        .into_iter()
        .map(|(name, shape)| {
            let n: usize = shape.iter().product();
            let data = payload[offset..offset + 4 * n]
                .chunks_exact(4)
                .map(|c| T::lit(f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64))
                .collect();
            offset += 4 * n;
            Param { name, shape, data }
        })
        .collect();
    Ok(ModelState { arch: header.arch, params: Params(params), step_count: header.step_count })
}

pub fn save_checkpoint<T: Scalar>(model: &ModelState<T>, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, to_bytes(model)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<ModelState<T>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}

/// Loads a checkpoint and requires its architecture to equal `expected`.
pub fn load_checkpoint_for<T: Scalar>(path: &Path, expected: &ArchSpec) -> Result<ModelState<T>> {
    let model: ModelState<T> = load_checkpoint(path)?;
    if model.arch.dims != expected.dims {
        return Err(Error::Incompatible(format!(
            "checkpoint {} holds a {}D model, {}D expected",
            path.display(),
            model.arch.dims,
            expected.dims
        )));
    }
    if &model.arch != expected {
        return Err(Error::Incompatible(format!(
            "checkpoint {} architecture {:?} differs from configured {:?}",
            path.display(),
            model.arch,
            expected
        )));
    }
    Ok(model)
}

/// Hex SHA-256 of the serialized checkpoint.
pub fn fingerprint<T: Scalar>(model: &ModelState<T>) -> String {
    hex(&Sha256::digest(to_bytes(model)))
}
