use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::patches::extract_patch;
use crate::error::{QsmError, Result};
use crate::nn::{stack_channels, Generator, Tensor};
use crate::scalar::Real;
use crate::volume::{Mask, RealVolume, VolumeMeta};

/// How overlapping patch outputs are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Blend {
    /// Plain average over covering patches.
    #[default]
    Uniform,
    /// Raised-cosine weights that fade towards patch borders.
    Cosine,
}

impl std::str::FromStr for Blend {
    type Err = QsmError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(Blend::Uniform),
            "cosine" => Ok(Blend::Cosine),
            _ => Err(QsmError::param(
                "blend",
                format!("expected uniform or cosine, got {s:?}"),
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InferConfig {
    pub patch: usize,
    pub stride: usize,
    pub blend: Blend,
    /// Worker threads for patch evaluation; results merge in window order regardless.
    pub threads: usize,
}

impl Default for InferConfig {
    fn default() -> Self {
        Self {
            patch: 16,
            stride: 8,
            blend: Blend::Uniform,
            threads: 1,
        }
    }
}

impl InferConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 {
            return Err(QsmError::param("patch", "must be positive"));
        }
        if self.stride == 0 || self.stride > self.patch {
            return Err(QsmError::param(
                "stride",
                format!("must be in 1..={}, got {}", self.patch, self.stride),
            ));
        }
        if self.threads == 0 {
            return Err(QsmError::param("threads", "must be positive"));
        }
        Ok(())
    }
}

/// Window starts along one axis: `0, s, 2s, ...` with the last window clamped to end at `n`.
/// Requires `n >= p`.
pub fn window_origins(n: usize, p: usize, s: usize) -> Vec<usize> {
    let mut v: Vec<usize> = (0..).map(|i| i * s).take_while(|&o| o + p < n).collect();
    v.push(n - p);
    v
}

fn windows(dims: [usize; 3], p: usize, s: usize) -> Vec<[usize; 3]> {
    let [ox, oy, oz] = [0, 1, 2].map(|a| window_origins(dims[a], p, s));
    let mut out = Vec::with_capacity(ox.len() * oy.len() * oz.len());
    for &z in &oz {
        for &y in &oy {
            for &x in &ox {
                out.push([x, y, z]);
            }
        }
    }
    out
}

/// Number of windows covering each voxel of a grid padded to at least one patch per axis.
pub fn coverage_counts(dims: [usize; 3], patch: usize, stride: usize) -> Vec<u32> {
    let padded = dims.map(|n| n.max(patch));
    let meta = VolumeMeta::isotropic(padded);
    let mut counts = vec![0u32; meta.len()];
    for o in windows(padded, patch, stride) {
        for z in o[2]..o[2] + patch {
            for y in o[1]..o[1] + patch {
                let row = meta.index(o[0], y, z);
                for c in &mut counts[row..row + patch] {
                    *c += 1;
                }
            }
        }
    }
    crop(&counts, padded, dims)
}

fn crop<V: Copy>(v: &[V], from: [usize; 3], to: [usize; 3]) -> Vec<V> {
    if from == to {
        return v.to_vec();
    }
    let meta = VolumeMeta::isotropic(from);
    let mut out = Vec::with_capacity(to.iter().product());
    for z in 0..to[2] {
        for y in 0..to[1] {
            let row = meta.index(0, y, z);
            out.extend_from_slice(&v[row..row + to[0]]);
        }
    }
    out
}

fn pad(v: &[f64], from: [usize; 3], to: [usize; 3]) -> Vec<f64> {
    if from == to {
        return v.to_vec();
    }
    let meta = VolumeMeta::isotropic(to);
    let mut out = vec![0.0; meta.len()];
    for z in 0..from[2] {
        for y in 0..from[1] {
            let src = from[0] * (y + from[1] * z);
            let dst = meta.index(0, y, z);
            out[dst..dst + from[0]].copy_from_slice(&v[src..src + from[0]]);
        }
    }
    out
}

fn blend_weights(p: usize, blend: Blend) -> Vec<f64> {
    let w1: Vec<f64> = match blend {
        Blend::Uniform => vec![1.0; p],
        Blend::Cosine => (0..p)
            .map(|i| {
                let t = std::f64::consts::PI * (i as f64 + 0.5) / p as f64;
                t.sin().powi(2)
            })
            .collect(),
    };
    let mut w = Vec::with_capacity(p * p * p);
    for z in 0..p {
        for y in 0..p {
            for x in 0..p {
                w.push(w1[x] * w1[y] * w1[z]);
            }
        }
    }
    w
}

/// Whole-volume prediction from patch-wise generator evaluations.
///
/// Windows slide with `stride`, the last one per axis clamped to the border, and overlapping
/// outputs are averaged per voxel. Axes shorter than the patch are zero-padded to one patch
/// and cropped afterwards. The result is zero outside `mask`.
pub fn infer_stitched<T: Real>(
    g: &Generator<T>,
    field: &RealVolume,
    magnitude: &RealVolume,
    mask: &Mask,
    cfg: &InferConfig,
) -> Result<RealVolume> {
    if g.config().in_channels != 2 {
        return Err(QsmError::param(
            "generator",
            "stitched inference feeds two input channels",
        ));
    }
    g.config().check_dims([cfg.patch; 3])?;
    stitch_with(|x| g.predict(x), field, magnitude, mask, cfg)
}

/// [`infer_stitched`] for any patch predictor mapping `[2, p, p, p]` to `[1, p, p, p]`.
pub fn stitch_with<T, F>(
    predict: F,
    field: &RealVolume,
    magnitude: &RealVolume,
    mask: &Mask,
    cfg: &InferConfig,
) -> Result<RealVolume>
where
    T: Real,
    F: Fn(Tensor<T>) -> Result<Tensor<T>> + Sync,
{
    cfg.validate()?;
    field.meta.ensure_same(&magnitude.meta, "magnitude")?;
    field.meta.ensure_same(&mask.meta, "mask")?;
    let p = cfg.patch;
    let dims = field.meta.dims;
    let padded = dims.map(|n| n.max(p));
    let grid = VolumeMeta::isotropic(padded);
    let phase = pad(&field.data, dims, padded);
    let mag = pad(&magnitude.data, dims, padded);
    let origins = windows(padded, p, cfg.stride);

    let run = |o: &[usize; 3]| -> Result<Vec<T>> {
        let a = extract_patch(&phase, &grid, *o, [p; 3]);
        let b = extract_patch(&mag, &grid, *o, [p; 3]);
        let input = stack_channels::<T>([p; 3], &[&a, &b])?;
        let out = predict(input)?;
        if out.len() != p * p * p {
            return Err(QsmError::Shape(format!(
                "patch predictor returned {:?}",
                out.shape()
            )));
        }
        Ok(out.into_data())
    };
    let outputs: Vec<Vec<T>> = if cfg.threads == 1 {
        origins.iter().map(run).collect::<Result<_>>()?
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.threads)
            .build()
            .map_err(|e| QsmError::param("threads", e.to_string()))?;
        // Indexed collect keeps window order, so the merge below is thread-count independent.
        pool.install(|| origins.par_iter().map(run).collect::<Result<_>>())?
    };

    let w = blend_weights(p, cfg.blend);
    let mut acc = vec![0.0; grid.len()];
    let mut wsum = vec![0.0; grid.len()];
    for (o, out) in origins.iter().zip(&outputs) {
        let mut k = 0;
        for z in o[2]..o[2] + p {
            for y in o[1]..o[1] + p {
                let row = grid.index(o[0], y, z);
                for i in row..row + p {
                    acc[i] += w[k] * out[k].as_f64();
                    wsum[i] += w[k];
                    k += 1;
                }
            }
        }
    }
    let stitched: Vec<f64> = acc
        .iter()
        .zip(&wsum)
        .map(|(&a, &s)| if s > 0.0 { a / s } else { 0.0 })
        .collect();
    if stitched.iter().any(|v| !v.is_finite()) {
        return Err(QsmError::NonFinite("stitched prediction".into()));
    }
    let data = crop(&stitched, padded, dims)
        .into_iter()
        .zip(&mask.data)
        .map(|(v, &m)| if m { v } else { 0.0 })
        .collect();
    RealVolume::new(field.meta, data)
}
