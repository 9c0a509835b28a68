//! Plain-text `key = value` configuration files.
//!
//! One entry per line; `#` starts a comment; blank lines are ignored. Keys may repeat where a
//! format allows it (phantom shapes). Values are parsed on demand.

use std::path::Path;
use std::str::FromStr;

use crate::error::{QsmError, Result};
use crate::phantom::{Geometry, PhantomSpec, Shape};
use crate::volume::VolumeMeta;

#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub key: String,
    pub value: String,
    pub line: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct KeyValues {
    entries: Vec<Entry>,
}

pub fn parse_key_values(text: &str) -> Result<KeyValues> {
    let mut entries = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let (key, value) = content.split_once('=').ok_or_else(|| QsmError::Config {
            line,
            reason: format!("expected `key = value`, got {content:?}"),
        })?;
        let key = key.trim();
        if key.is_empty() || key.contains(char::is_whitespace) {
            return Err(QsmError::Config {
                line,
                reason: format!("invalid key {key:?}"),
            });
        }
        entries.push(Entry {
            key: key.to_string(),
            value: value.trim().to_string(),
            line,
        });
    }
    Ok(KeyValues { entries })
}

pub fn read_key_values(path: &Path) -> Result<KeyValues> {
    parse_key_values(&std::fs::read_to_string(path)?)
}

impl KeyValues {
    pub fn entries(&self) -> &[Entry] {
        &self.entries
    }

    pub fn all<'a, 'k>(&'a self, key: &'k str) -> impl Iterator<Item = &'a Entry> + use<'a, 'k> {
        self.entries.iter().filter(move |e| e.key == key)
    }

    /// The single entry for `key`; repeating a scalar key is an error.
    pub fn get(&self, key: &str) -> Result<Option<&Entry>> {
        let mut it = self.all(key);
        let first = it.next();
        if let Some(dup) = it.next() {
            return Err(QsmError::Config {
                line: dup.line,
                reason: format!("duplicate key {key:?}"),
            });
        }
        Ok(first)
    }

    pub fn parse<T: FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        match self.get(key)? {
            None => Ok(None),
            Some(e) => parse_value(e).map(Some),
        }
    }

    /// Rejects keys outside `known`.
    pub fn ensure_known(&self, known: &[&str]) -> Result<()> {
        match self
            .entries
            .iter()
            .find(|e| !known.contains(&e.key.as_str()))
        {
            Some(e) => Err(QsmError::Config {
                line: e.line,
                reason: format!("unknown key {:?}", e.key),
            }),
            None => Ok(()),
        }
    }
}

pub fn parse_value<T: FromStr>(e: &Entry) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    e.value.parse().map_err(|err| QsmError::Config {
        line: e.line,
        reason: format!("{}: cannot parse {:?}: {err}", e.key, e.value),
    })
}

/// Whitespace- or comma-separated numbers, exactly `n` of them.
pub fn parse_numbers<T: FromStr>(e: &Entry, n: usize) -> Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    let parts: Vec<&str> = e
        .value
        .split(|c: char| c.is_whitespace() || c == ',')
        .filter(|s| !s.is_empty())
        .collect();
    if parts.len() != n {
        return Err(QsmError::Config {
            line: e.line,
            reason: format!("{} needs {n} values, got {}", e.key, parts.len()),
        });
    }
    parts
        .iter()
        .map(|p| {
            p.parse().map_err(|err| QsmError::Config {
                line: e.line,
                reason: format!("{}: cannot parse {p:?}: {err}", e.key),
            })
        })
        .collect()
}

fn triple<T: FromStr + Copy>(e: &Entry) -> Result<[T; 3]>
where
    T::Err: std::fmt::Display,
{
    let v = parse_numbers(e, 3)?;
    Ok([v[0], v[1], v[2]])
}

pub const PHANTOM_KEYS: [&str; 7] = [
    "dims",
    "voxel_size",
    "b0_dir",
    "background_chi",
    "seed",
    "sphere",
    "box",
];

/// Phantom description:
///
/// ```text
/// dims = 64 64 64
/// voxel_size = 1 1 1          # mm, default 1 1 1
/// b0_dir = 0 0 1              # default 0 0 1
/// background_chi = 0          # ppm, default 0
/// seed = 0
/// sphere = 32 32 32 10 0.1    # center (mm), radius (mm), chi (ppm)
/// box = 8 8 8 10 10 10 -0.05  # corner (mm), extent (mm), chi (ppm)
/// ```
///
/// Shapes are painted in file order.
pub fn parse_phantom_spec(text: &str) -> Result<PhantomSpec> {
    let kv = parse_key_values(text)?;
    kv.ensure_known(&PHANTOM_KEYS)?;
    let dims_entry = kv.get("dims")?.ok_or(QsmError::Config {
        line: 0,
        reason: "missing required key \"dims\"".into(),
    })?;
    let dims: [usize; 3] = triple(dims_entry)?;
    let voxel_size = kv
        .get("voxel_size")?
        .map(triple)
        .transpose()?
        .unwrap_or([1.0; 3]);
    let b0_dir = kv
        .get("b0_dir")?
        .map(triple)
        .transpose()?
        .unwrap_or([0.0, 0.0, 1.0]);
    let meta = VolumeMeta::new(dims, voxel_size, b0_dir).map_err(|e| QsmError::Config {
        line: dims_entry.line,
        reason: e.to_string(),
    })?;
    let mut shapes = Vec::new();
    for e in kv.entries() {
        let shape = match e.key.as_str() {
            "sphere" => {
                let v: Vec<f64> = parse_numbers(e, 5)?;
                Shape {
                    geometry: Geometry::Sphere {
                        center: [v[0], v[1], v[2]],
                        radius: v[3],
                    },
                    chi: v[4],
                }
            }
            "box" => {
                let v: Vec<f64> = parse_numbers(e, 7)?;
                Shape {
                    geometry: Geometry::Box {
                        corner: [v[0], v[1], v[2]],
                        extent: [v[3], v[4], v[5]],
                    },
                    chi: v[6],
                }
            }
            _ => continue,
        };
        shapes.push(shape);
    }
    Ok(PhantomSpec {
        meta,
        shapes,
        background_chi: kv.parse("background_chi")?.unwrap_or(0.0),
        seed: kv.parse("seed")?.unwrap_or(0),
    })
}
