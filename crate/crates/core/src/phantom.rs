//! Synthetic susceptibility phantoms, simulated field measurements and the analytic
//! field of a uniformly magnetized sphere.
//!
//! Positions are in mm; voxel `i` along an axis with size `s` covers `[i*s, (i+1)*s)` and
//! is sampled at its center `(i + 0.5) * s`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::dipole::{build_dipole, forward_field};
use crate::error::{QsmError, Result};
use crate::volume::{Mask, RealVolume, VolumeMeta};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Geometry {
    Sphere { center: [f64; 3], radius: f64 },
    Box { corner: [f64; 3], extent: [f64; 3] },
}

impl Geometry {
    pub fn contains(&self, p: [f64; 3]) -> bool {
        match *self {
            Geometry::Sphere { center, radius } => {
                let d2: f64 = (0..3).map(|i| (p[i] - center[i]).powi(2)).sum();
                d2 <= radius * radius
            }
            Geometry::Box { corner, extent } => {
                (0..3).all(|i| p[i] >= corner[i] && p[i] < corner[i] + extent[i])
            }
        }
    }

    fn bounds(&self) -> ([f64; 3], [f64; 3]) {
        match *self {
            Geometry::Sphere { center, radius } => {
                (center.map(|c| c - radius), center.map(|c| c + radius))
            }
            Geometry::Box { corner, extent } => (corner, [0, 1, 2].map(|i| corner[i] + extent[i])),
        }
    }

    fn validate(&self, meta: &VolumeMeta) -> Result<()> {
        match *self {
            Geometry::Sphere { radius, .. } if !(radius > 0.0) => {
                return Err(QsmError::param(
                    "radius",
                    format!("must be > 0, got {radius}"),
                ))
            }
            Geometry::Box { extent, .. } if extent.iter().any(|&e| !(e > 0.0)) => {
                return Err(QsmError::param(
                    "extent",
                    format!("must be > 0, got {extent:?}"),
                ))
            }
            _ => {}
        }
        let (lo, hi) = self.bounds();
        let size = grid_extent(meta);
        if (0..3).any(|i| lo[i] < 0.0 || hi[i] > size[i]) {
            return Err(QsmError::param(
                "shape",
                format!("{self:?} does not lie inside the grid extent {size:?} mm"),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Shape {
    pub geometry: Geometry,
    /// ppm
    pub chi: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhantomSpec {
    pub meta: VolumeMeta,
    pub shapes: Vec<Shape>,
    pub background_chi: f64,
    pub seed: u64,
}

impl PhantomSpec {
    /// Voxels inside any shape.
    pub fn mask(&self) -> Result<Mask> {
        let data = voxel_centers(&self.meta)
            .map(|p| self.shapes.iter().any(|s| s.geometry.contains(p)))
            .collect();
        Mask::new(self.meta, data)
    }
}

pub fn grid_extent(meta: &VolumeMeta) -> [f64; 3] {
    [0, 1, 2].map(|i| meta.dims[i] as f64 * meta.voxel_size[i])
}

pub fn voxel_center(meta: &VolumeMeta, x: usize, y: usize, z: usize) -> [f64; 3] {
    let s = meta.voxel_size;
    [
        (x as f64 + 0.5) * s[0],
        (y as f64 + 0.5) * s[1],
        (z as f64 + 0.5) * s[2],
    ]
}

/// Voxel centers in storage order.
pub fn voxel_centers(meta: &VolumeMeta) -> impl Iterator<Item = [f64; 3]> + '_ {
    let [nx, ny, nz] = meta.dims;
    (0..nz).flat_map(move |z| {
        (0..ny).flat_map(move |y| (0..nx).map(move |x| voxel_center(meta, x, y, z)))
    })
}

/// Last containing shape wins; uncovered voxels take the background value.
pub fn make_phantom(spec: &PhantomSpec) -> Result<RealVolume> {
    spec.meta.validate()?;
    for s in &spec.shapes {
        s.geometry.validate(&spec.meta)?;
    }
    let data = voxel_centers(&spec.meta)
        .map(|p| {
            spec.shapes
                .iter()
                .rev()
                .find(|s| s.geometry.contains(p))
                .map_or(spec.background_chi, |s| s.chi)
        })
        .collect();
    RealVolume::new(spec.meta, data)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ellipsoid {
    pub center: [f64; 3],
    pub semi_axes: [f64; 3],
    pub chi: f64,
}

impl Ellipsoid {
    pub fn contains(&self, p: [f64; 3]) -> bool {
        (0..3)
            .map(|i| ((p[i] - self.center[i]) / self.semi_axes[i]).powi(2))
            .sum::<f64>()
            <= 1.0
    }
}

pub const DEFAULT_CHI_RANGE: [f64; 2] = [-0.2, 0.2];

/// Ellipsoidal "head" region centered in the grid, semi-axes 40% of the grid extent.
pub fn head_region(meta: &VolumeMeta) -> Ellipsoid {
    let size = grid_extent(meta);
    Ellipsoid {
        center: size.map(|s| s / 2.0),
        semi_axes: size.map(|s| 0.4 * s),
        chi: 0.0,
    }
}

pub fn head_mask(meta: &VolumeMeta) -> Result<Mask> {
    let head = head_region(meta);
    Mask::new(
        *meta,
        voxel_centers(meta).map(|p| head.contains(p)).collect(),
    )
}

pub fn random_blobs(
    meta: &VolumeMeta,
    n_blobs: usize,
    chi_range: [f64; 2],
    rng: &mut impl Rng,
) -> Result<Vec<Ellipsoid>> {
    if n_blobs < 1 {
        return Err(QsmError::param("n_blobs", "must be >= 1"));
    }
    if !(chi_range[0] <= chi_range[1]) || chi_range.iter().any(|v| !v.is_finite()) {
        return Err(QsmError::param(
            "chi_range",
            format!("invalid range {chi_range:?}"),
        ));
    }
    let head = head_region(meta);
    let size = grid_extent(meta);
    let blobs = (0..n_blobs)
        .map(|_| {
            let semi_axes = size.map(|s| s * rng.random_range(0.06..0.16));
            // uniform direction and radius fraction inside the head, shrunk so blobs stay mostly inside
            let mut offset = [0.0; 3];
            loop {
                for o in offset.iter_mut() {
                    *o = rng.random_range(-1.0..1.0);
                }
                if offset.iter().map(|o| o * o).sum::<f64>() <= 1.0 {
                    break;
                }
            }
            let center = [0, 1, 2].map(|i| head.center[i] + 0.7 * offset[i] * head.semi_axes[i]);
            let chi = if chi_range[0] == chi_range[1] {
                chi_range[0]
            } else {
                rng.random_range(chi_range[0]..chi_range[1])
            };
            Ellipsoid {
                center,
                semi_axes,
                chi,
            }
        })
        .collect();
    Ok(blobs)
}

#[derive(Debug, Clone)]
pub struct PiecewisePhantom {
    pub chi: RealVolume,
    pub mask: Mask,
    pub blobs: Vec<Ellipsoid>,
}

impl PiecewisePhantom {
    /// One ROI per blob (clipped to the head); blobs with no voxels are skipped.
    pub fn blob_masks(&self) -> Vec<(String, Mask)> {
        let meta = self.chi.meta;
        self.blobs
            .iter()
            .enumerate()
            .filter_map(|(i, b)| {
                let data: Vec<bool> = voxel_centers(&meta)
                    .zip(&self.mask.data)
                    .map(|(p, &m)| m && b.contains(p))
                    .collect();
                Mask::new(meta, data).ok().map(|m| (format!("blob{i}"), m))
            })
            .collect()
    }
}

/// Random ellipsoids with uniform susceptibilities inside the head region; the last blob wins
/// where they overlap and everything outside the head is zero.
pub fn random_piecewise(
    meta: VolumeMeta,
    n_blobs: usize,
    chi_range: [f64; 2],
    seed: u64,
) -> Result<PiecewisePhantom> {
    meta.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let blobs = random_blobs(&meta, n_blobs, chi_range, &mut rng)?;
    let head = head_region(&meta);
    let mut data = Vec::with_capacity(meta.len());
    let mut inside = Vec::with_capacity(meta.len());
    for p in voxel_centers(&meta) {
        let in_head = head.contains(p);
        inside.push(in_head);
        let v = if in_head {
            blobs
                .iter()
                .rev()
                .find(|b| b.contains(p))
                .map_or(0.0, |b| b.chi)
        } else {
            0.0
        };
        data.push(v);
    }
    Ok(PiecewisePhantom {
        chi: RealVolume::new(meta, data)?,
        mask: Mask::new(meta, inside)?,
        blobs,
    })
}

pub fn make_random_piecewise(
    meta: VolumeMeta,
    n_blobs: usize,
    chi_range: [f64; 2],
    seed: u64,
) -> Result<RealVolume> {
    Ok(random_piecewise(meta, n_blobs, chi_range, seed)?.chi)
}

#[derive(Debug, Clone)]
pub struct SimulatedCase {
    pub chi: RealVolume,
    pub field: RealVolume,
    pub magnitude: RealVolume,
    pub mask: Mask,
    pub noise_sigma: f64,
}

/// Adds i.i.d. `N(0, sigma^2)` to every voxel; `sigma = 0` leaves `v` untouched.
pub fn add_noise(v: &mut RealVolume, sigma: f64, seed: u64) -> Result<()> {
    if !(sigma.is_finite() && sigma >= 0.0) {
        return Err(QsmError::param(
            "noise_sigma",
            format!("must be >= 0, got {sigma}"),
        ));
    }
    if sigma > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, sigma).expect("sigma validated");
        for x in v.data.iter_mut() {
            *x += normal.sample(&mut rng);
        }
    }
    Ok(())
}

/// `field = H chi + N(0, sigma^2)`; magnitude is the mask indicator.
pub fn simulate_case(
    chi: &RealVolume,
    mask: &Mask,
    noise_sigma: f64,
    seed: u64,
) -> Result<SimulatedCase> {
    chi.meta.ensure_same(&mask.meta, "simulate_case")?;
    let kernel = build_dipole(chi.meta)?;
    let mut field = forward_field(chi, &kernel)?;
    add_noise(&mut field, noise_sigma, seed)?;
    Ok(SimulatedCase {
        chi: chi.clone(),
        field,
        magnitude: mask.to_volume(),
        mask: mask.clone(),
        noise_sigma,
    })
}

/// Local field of a uniform sphere (Lorentz-corrected): zero inside, and outside
/// `(dchi/3) (R/r)^3 (3 cos^2(theta) - 1)` with `theta` measured from `b0_dir`.
pub fn sphere_field_at(
    p: [f64; 3],
    center: [f64; 3],
    radius: f64,
    delta_chi: f64,
    b0: [f64; 3],
) -> f64 {
    let d = [p[0] - center[0], p[1] - center[1], p[2] - center[2]];
    let r2 = d[0] * d[0] + d[1] * d[1] + d[2] * d[2];
    if r2 <= radius * radius {
        return 0.0;
    }
    let r = r2.sqrt();
    let cos = (d[0] * b0[0] + d[1] * b0[1] + d[2] * b0[2]) / r;
    delta_chi / 3.0 * (radius / r).powi(3) * (3.0 * cos * cos - 1.0)
}

pub fn analytic_sphere_field(
    meta: VolumeMeta,
    center: [f64; 3],
    radius: f64,
    delta_chi: f64,
) -> Result<RealVolume> {
    if !(radius > 0.0) {
        return Err(QsmError::param(
            "radius",
            format!("must be > 0, got {radius}"),
        ));
    }
    meta.validate()?;
    let data = voxel_centers(&meta)
        .map(|p| sphere_field_at(p, center, radius, delta_chi, meta.b0_dir))
        .collect();
    RealVolume::new(meta, data)
}
