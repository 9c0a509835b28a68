//! DBC1 model checkpoints.
//!
//! Layout: one line of JSON
//! `{"magic":"DBC1","version":1,"kind":..,"config":{..},"tensors":[{"name":..,"shape":[..]},..]}`,
//! a single `\n`, then each tensor's values as little-endian `f32`, in header order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::discriminator::{Discriminator, DiscriminatorConfig};
use super::generator::{Generator, GeneratorConfig};
use super::params::ParamSet;
use super::tensor::Tensor;
use crate::error::{QsmError, Result};
use crate::scalar::Real;

pub const CHECKPOINT_MAGIC: &str = "DBC1";
pub const CHECKPOINT_VERSION: u32 = 1;
pub const GENERATOR_KIND: &str = "generator";
pub const DISCRIMINATOR_KIND: &str = "discriminator";

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    magic: String,
    version: u32,
    kind: String,
    config: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub kind: String,
    pub config: serde_json::Value,
    pub params: ParamSet<f32>,
}

pub fn encode_checkpoint<T: Real>(
    kind: &str,
    config: serde_json::Value,
    params: &ParamSet<T>,
) -> Vec<u8> {
    let header = Header {
        magic: CHECKPOINT_MAGIC.into(),
        version: CHECKPOINT_VERSION,
        kind: kind.into(),
        config,
        tensors: params
            .iter()
            .map(|(name, t)| TensorEntry {
                name: name.into(),
                shape: t.shape().to_vec(),
            })
            .collect(),
    };
    let mut out = serde_json::to_vec(&header).expect("header serialization cannot fail");
    out.push(b'\n');
    for (_, t) in params.iter() {
        for &v in t.data() {
            out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
    }
    out
}

pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<Checkpoint> {
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
    if header.magic != CHECKPOINT_MAGIC {
        return Err(malformed(format!(
            "magic is {:?}, expected {CHECKPOINT_MAGIC:?}",
            header.magic
        )));
    }
    if header.version != CHECKPOINT_VERSION {
        return Err(malformed(format!("unsupported version {}", header.version)));
    }
    let mut expected = 0usize;
    for t in &header.tensors {
        if t.shape.is_empty() || t.shape.contains(&0) {
            return Err(malformed(format!(
                "tensor {} has invalid shape {:?}",
                t.name, t.shape
            )));
        }
        expected += t.shape.iter().product::<usize>() * 4;
    }
    let payload = &bytes[newline + 1..];
    if payload.len() != expected {
        return Err(QsmError::SizeMismatch {
            path: path.to_path_buf(),
            expected,
            found: payload.len(),
        });
    }
    let mut params = ParamSet::new();
    let mut values = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]));
    let mut index = 0;
    for entry in header.tensors {
        let n = entry.shape.iter().product();
        let data: Vec<f32> = values.by_ref().take(n).collect();
        if let Some(bad) = data.iter().position(|v| !v.is_finite()) {
            return Err(QsmError::NonFinitePayload {
                path: path.to_path_buf(),
                index: index + bad,
            });
        }
        index += n;
        params.push(entry.name, Tensor::new(entry.shape, data)?);
    }
    Ok(Checkpoint {
        kind: header.kind,
        config: header.config,
        params,
    })
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    decode_checkpoint(&fs::read(path)?, path)
}

fn write(path: &Path, bytes: Vec<u8>) -> Result<()> {
    fs::write(path, bytes)?;
    Ok(())
}

fn config_of<C: for<'de> Deserialize<'de>>(ck: &Checkpoint, kind: &str, path: &Path) -> Result<C> {
    if ck.kind != kind {
        return Err(QsmError::MalformedHeader {
            path: path.to_path_buf(),
            reason: format!("checkpoint holds a {}, expected a {kind}", ck.kind),
        });
    }
    serde_json::from_value(ck.config.clone()).map_err(|e| QsmError::MalformedHeader {
        path: path.to_path_buf(),
        reason: format!("invalid {kind} config: {e}"),
    })
}

pub fn save_generator<T: Real>(path: &Path, g: &Generator<T>) -> Result<()> {
    let config = serde_json::to_value(g.config()).expect("config serializes");
    write(path, encode_checkpoint(GENERATOR_KIND, config, g.params()))
}

pub fn load_generator(path: &Path) -> Result<Generator<f32>> {
    let ck = read_checkpoint(path)?;
    let config: GeneratorConfig = config_of(&ck, GENERATOR_KIND, path)?;
    Generator::from_params(config, ck.params).map_err(|e| QsmError::MalformedHeader {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

pub fn save_discriminator<T: Real>(path: &Path, d: &Discriminator<T>) -> Result<()> {
    let config = serde_json::to_value(d.config()).expect("config serializes");
    write(
        path,
        encode_checkpoint(DISCRIMINATOR_KIND, config, d.params()),
    )
}

pub fn load_discriminator(path: &Path) -> Result<Discriminator<f32>> {
    let ck = read_checkpoint(path)?;
    let config: DiscriminatorConfig = config_of(&ck, DISCRIMINATOR_KIND, path)?;
    Discriminator::from_params(config, ck.params).map_err(|e| QsmError::MalformedHeader {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}
