//! 3D volumes on a regular grid, their Fourier transforms and finite differences.
//!
//! Arrays are stored x-fastest, z-slowest: voxel `(x, y, z)` lives at
//! `x + nx * (y + ny * z)`.

mod fft;
pub mod io;

use num_complex::Complex64;

pub use fft::{fft_index_freq, Fft3};

use crate::error::{QsmError, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VolumeMeta {
    pub dims: [usize; 3],
    /// Voxel size in mm.
    pub voxel_size: [f64; 3],
    /// Unit vector along the main magnetic field.
    pub b0_dir: [f64; 3],
}

impl VolumeMeta {
    pub fn new(dims: [usize; 3], voxel_size: [f64; 3], b0_dir: [f64; 3]) -> Result<Self> {
        let meta = Self {
            dims,
            voxel_size,
            b0_dir,
        };
        meta.validate()?;
        Ok(meta)
    }

    /// Isotropic 1 mm grid with B0 along z.
    pub fn isotropic(dims: [usize; 3]) -> Self {
        Self {
            dims,
            voxel_size: [1.0; 3],
            b0_dir: [0.0, 0.0, 1.0],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.contains(&0) {
            return Err(QsmError::InvalidMeta(format!(
                "zero dimension in {:?}",
                self.dims
            )));
        }
        if self.voxel_size.iter().any(|&s| !(s.is_finite() && s > 0.0)) {
            return Err(QsmError::InvalidMeta(format!(
                "voxel sizes must be positive, got {:?}",
                self.voxel_size
            )));
        }
        let norm = self.b0_dir.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !norm.is_finite() || (norm - 1.0).abs() > 1e-12 {
            return Err(QsmError::InvalidMeta(format!(
                "b0_dir must be a unit vector, |b0| = {norm}"
            )));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    /// Axis index when B0 is aligned with a grid axis.
    pub fn b0_axis(&self) -> Option<usize> {
        self.b0_dir
            .iter()
            .position(|c| (c.abs() - 1.0).abs() <= 1e-12)
    }

    /// Same geometry with different grid dimensions (patch grids).
    pub fn with_dims(&self, dims: [usize; 3]) -> Self {
        Self { dims, ..*self }
    }

    pub fn same_grid(&self, other: &VolumeMeta) -> bool {
        self == other
    }

    pub(crate) fn ensure_same(&self, other: &VolumeMeta, what: &str) -> Result<()> {
        if self.same_grid(other) {
            Ok(())
        } else {
            Err(QsmError::DimMismatch(format!(
                "{what}: {:?}/{:?} vs {:?}/{:?}",
                self.dims, self.voxel_size, other.dims, other.voxel_size
            )))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RealVolume {
    pub meta: VolumeMeta,
    pub data: Vec<f64>,
}

impl RealVolume {
    pub fn new(meta: VolumeMeta, data: Vec<f64>) -> Result<Self> {
        meta.validate()?;
        if data.len() != meta.len() {
            return Err(QsmError::DimMismatch(format!(
                "data length {} does not match dims {:?}",
                data.len(),
                meta.dims
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(QsmError::NonFinite(format!("volume data at element {i}")));
        }
        Ok(Self { meta, data })
    }

    pub fn zeros(meta: VolumeMeta) -> Self {
        Self {
            data: vec![0.0; meta.len()],
            meta,
        }
    }

    pub fn constant(meta: VolumeMeta, value: f64) -> Self {
        Self {
            data: vec![value; meta.len()],
            meta,
        }
    }

    pub fn from_fn(meta: VolumeMeta, mut f: impl FnMut(usize, usize, usize) -> f64) -> Self {
        let [nx, ny, nz] = meta.dims;
        let mut data = Vec::with_capacity(meta.len());
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    data.push(f(x, y, z));
                }
            }
        }
        Self { meta, data }
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize, z: usize) -> f64 {
        self.data[self.meta.index(x, y, z)]
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn dot(&self, other: &RealVolume) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }

    pub fn norm2(&self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> RealVolume {
        RealVolume {
            meta: self.meta,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &RealVolume, f: impl Fn(f64, f64) -> f64) -> RealVolume {
        debug_assert_eq!(self.data.len(), other.data.len());
        RealVolume {
            meta: self.meta,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub fn masked(&self, mask: &Mask) -> RealVolume {
        RealVolume {
            meta: self.meta,
            data: self
                .data
                .iter()
                .zip(&mask.data)
                .map(|(&v, &m)| if m { v } else { 0.0 })
                .collect(),
        }
    }

    fn check_finite(&self, what: &str) -> Result<()> {
        match self.data.iter().position(|v| !v.is_finite()) {
            Some(i) => Err(QsmError::NonFinite(format!("{what} at element {i}"))),
            None => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComplexVolume {
    pub meta: VolumeMeta,
    pub data: Vec<Complex64>,
}

impl ComplexVolume {
    pub fn from_real(v: &RealVolume) -> Self {
        Self {
            meta: v.meta,
            data: v.data.iter().map(|&r| Complex64::new(r, 0.0)).collect(),
        }
    }

    pub fn real(&self) -> RealVolume {
        RealVolume {
            meta: self.meta,
            data: self.data.iter().map(|c| c.re).collect(),
        }
    }

    pub fn max_abs_imag(&self) -> f64 {
        self.data.iter().fold(0.0, |m, c| m.max(c.im.abs()))
    }

    fn check_finite(&self, what: &str) -> Result<()> {
        match self
            .data
            .iter()
            .position(|c| !(c.re.is_finite() && c.im.is_finite()))
        {
            Some(i) => Err(QsmError::NonFinite(format!("{what} at element {i}"))),
            None => Ok(()),
        }
    }
}

/// Binary region of interest (brain mask, ROI, ...).
#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    pub meta: VolumeMeta,
    pub data: Vec<bool>,
}

impl Mask {
    pub fn new(meta: VolumeMeta, data: Vec<bool>) -> Result<Self> {
        meta.validate()?;
        if data.len() != meta.len() {
            return Err(QsmError::DimMismatch(format!(
                "mask length {} does not match dims {:?}",
                data.len(),
                meta.dims
            )));
        }
        if !data.iter().any(|&m| m) {
            return Err(QsmError::InvalidParam {
                name: "mask",
                reason: "mask has no nonzero voxel".into(),
            });
        }
        Ok(Self { meta, data })
    }

    pub fn full(meta: VolumeMeta) -> Self {
        Self {
            data: vec![true; meta.len()],
            meta,
        }
    }

    /// Accepts a volume of exact 0/1 values.
    pub fn from_volume(v: &RealVolume) -> Result<Self> {
        let mut data = Vec::with_capacity(v.data.len());
        for (i, &x) in v.data.iter().enumerate() {
            if x == 0.0 {
                data.push(false);
            } else if x == 1.0 {
                data.push(true);
            } else {
                return Err(QsmError::InvalidParam {
                    name: "mask",
                    reason: format!("value {x} at element {i} is not 0 or 1"),
                });
            }
        }
        Mask::new(v.meta, data)
    }

    pub fn to_volume(&self) -> RealVolume {
        RealVolume {
            meta: self.meta,
            data: self
                .data
                .iter()
                .map(|&m| if m { 1.0 } else { 0.0 })
                .collect(),
        }
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&m| m).count()
    }
}

/// Unnormalized forward DFT.
pub fn fft3(v: &RealVolume) -> Result<ComplexVolume> {
    v.check_finite("fft3 input")?;
    let mut out = ComplexVolume::from_real(v);
    Fft3::<f64>::new(v.meta.dims).forward(&mut out.data);
    Ok(out)
}

pub fn fft3_complex(v: &ComplexVolume) -> Result<ComplexVolume> {
    v.check_finite("fft3 input")?;
    let mut out = v.clone();
    Fft3::<f64>::new(v.meta.dims).forward(&mut out.data);
    Ok(out)
}

/// Inverse DFT with `1/N` normalization.
pub fn ifft3(v: &ComplexVolume) -> Result<ComplexVolume> {
    v.check_finite("ifft3 input")?;
    let mut out = v.clone();
    Fft3::<f64>::new(v.meta.dims).inverse(&mut out.data);
    Ok(out)
}

/// Forward differences per axis with a replicate boundary (last slice difference is 0).
pub fn grad3(v: &RealVolume) -> [RealVolume; 3] {
    let mut out = [
        RealVolume::zeros(v.meta),
        RealVolume::zeros(v.meta),
        RealVolume::zeros(v.meta),
    ];
    let [gx, gy, gz] = &mut out;
    grad3_slice(
        &v.data,
        v.meta.dims,
        &mut gx.data,
        &mut gy.data,
        &mut gz.data,
    );
    out
}

/// Negative adjoint of [`grad3`]: `<grad3 u, g> = -<u, div3 g>`.
pub fn div3(gx: &RealVolume, gy: &RealVolume, gz: &RealVolume) -> Result<RealVolume> {
    gx.meta.ensure_same(&gy.meta, "div3 components")?;
    gx.meta.ensure_same(&gz.meta, "div3 components")?;
    let mut out = RealVolume::zeros(gx.meta);
    div3_slice(&gx.data, &gy.data, &gz.data, gx.meta.dims, &mut out.data);
    Ok(out)
}

pub(crate) fn grad3_slice<T: crate::Real>(
    v: &[T],
    dims: [usize; 3],
    gx: &mut [T],
    gy: &mut [T],
    gz: &mut [T],
) {
    let [nx, ny, nz] = dims;
    let sy = nx;
    let sz = nx * ny;
    for z in 0..nz {
        for y in 0..ny {
            let row = sy * y + sz * z;
            for x in 0..nx {
                let i = row + x;
                gx[i] = if x + 1 < nx {
                    v[i + 1] - v[i]
                } else {
                    T::zero()
                };
                gy[i] = if y + 1 < ny {
                    v[i + sy] - v[i]
                } else {
                    T::zero()
                };
                gz[i] = if z + 1 < nz {
                    v[i + sz] - v[i]
                } else {
                    T::zero()
                };
            }
        }
    }
}

/// Backward differences matching the forward-difference gradient; writes `div(g)`.
pub(crate) fn div3_slice<T: crate::Real>(
    gx: &[T],
    gy: &[T],
    gz: &[T],
    dims: [usize; 3],
    out: &mut [T],
) {
    let [nx, ny, nz] = dims;
    let sy = nx;
    let sz = nx * ny;
    for z in 0..nz {
        for y in 0..ny {
            let row = sy * y + sz * z;
            for x in 0..nx {
                let i = row + x;
                let mut d = T::zero();
                if x + 1 < nx {
                    d = d + gx[i];
                }
                if x > 0 {
                    d = d - gx[i - 1];
                }
                if y + 1 < ny {
                    d = d + gy[i];
                }
                if y > 0 {
                    d = d - gy[i - sy];
                }
                if z + 1 < nz {
                    d = d + gz[i];
                }
                if z > 0 {
                    d = d - gz[i - sz];
                }
                out[i] = d;
            }
        }
    }
}
