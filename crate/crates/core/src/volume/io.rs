//! DBV1 volume files.
//!
//! Layout: one line of JSON
//! `{"magic":"DBV1","dims":[nx,ny,nz],"voxel_size_mm":[..],"b0_dir":[..],"dtype":"f32"}`,
//! a single `\n`, then `nx*ny*nz` little-endian `f32` values in x-fastest order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{RealVolume, VolumeMeta};
use crate::error::{QsmError, Result};

pub const VOLUME_MAGIC: &str = "DBV1";

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    magic: String,
    dims: [usize; 3],
    voxel_size_mm: [f64; 3],
    b0_dir: [f64; 3],
    dtype: String,
}

pub fn encode_volume(v: &RealVolume) -> Vec<u8> {
    let header = Header {
        magic: VOLUME_MAGIC.to_string(),
        dims: v.meta.dims,
        voxel_size_mm: v.meta.voxel_size,
        b0_dir: v.meta.b0_dir,
        dtype: "f32".to_string(),
    };
    let mut out = serde_json::to_vec(&header).expect("header serialization cannot fail");
    out.push(b'\n');
    out.reserve(v.data.len() * 4);
    for &x in &v.data {
        out.extend_from_slice(&(x as f32).to_le_bytes());
    }
    out
}

pub fn decode_volume(bytes: &[u8], path: &Path) -> Result<RealVolume> {
    let malformed = |reason: String| QsmError::MalformedHeader {
        path: path.to_path_buf(),
        reason,
    };
    let newline = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| malformed("no header terminator".into()))?;
    let header: Header = serde_json::from_slice(&bytes[..newline])
        .map_err(|e| malformed(format!("invalid JSON header: {e}")))?;
    if header.magic != VOLUME_MAGIC {
        return Err(malformed(format!(
            "magic is {:?}, expected {VOLUME_MAGIC:?}",
            header.magic
        )));
    }
    if header.dtype != "f32" {
        return Err(malformed(format!("unsupported dtype {:?}", header.dtype)));
    }
    let meta = VolumeMeta::new(header.dims, header.voxel_size_mm, header.b0_dir)
        .map_err(|e| malformed(e.to_string()))?;
    let payload = &bytes[newline + 1..];
    let expected = meta.len() * 4;
    if payload.len() != expected {
        return Err(QsmError::SizeMismatch {
            path: path.to_path_buf(),
            expected,
            found: payload.len(),
        });
    }
    let mut data = Vec::with_capacity(meta.len());
    for (index, chunk) in payload.chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
        if !v.is_finite() {
            return Err(QsmError::NonFinitePayload {
                path: path.to_path_buf(),
                index,
            });
        }
        data.push(v as f64);
    }
    Ok(RealVolume { meta, data })
}

pub fn read_volume(path: impl AsRef<Path>) -> Result<RealVolume> {
    let path = path.as_ref();
    let bytes = fs::read(path)?;
    decode_volume(&bytes, path)
}

/// Values are stored as `f32`; volumes whose values are not representable lose precision.
pub fn write_volume(v: &RealVolume, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_volume(v))?;
    Ok(())
}
