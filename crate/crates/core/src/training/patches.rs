use log::info;
use rand::Rng;

use super::UnpairedDataset;
use crate::error::{QsmError, Result};
use crate::volume::VolumeMeta;

/// Where one training example comes from. The field and label indices are drawn independently.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchDraw {
    pub field_case: usize,
    pub field_origin: [usize; 3],
    pub chi_volume: usize,
    pub chi_origin: [usize; 3],
}

/// Co-registered volumes on one patch grid (x fastest), transformed together.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchGroup {
    pub dims: [usize; 3],
    pub channels: Vec<Vec<f64>>,
}

/// A field group `[phase, magnitude, mask]` and an unrelated label group `[chi, mask]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchPair {
    pub field: PatchGroup,
    pub chi: PatchGroup,
}

fn origin<R: Rng + ?Sized>(dims: [usize; 3], patch: [usize; 3], rng: &mut R) -> Result<[usize; 3]> {
    let mut o = [0; 3];
    for a in 0..3 {
        if dims[a] < patch[a] {
            return Err(QsmError::DimMismatch(format!(
                "volume {dims:?} is smaller than patch {patch:?}"
            )));
        }
        o[a] = rng.random_range(0..=dims[a] - patch[a]);
    }
    Ok(o)
}

/// Draws `count` uniformly placed patches; each patch lies fully inside its volume.
/// Label draws are skipped (zeroed) when the dataset has no labels.
pub fn draw_patches<R: Rng + ?Sized>(
    ds: &UnpairedDataset,
    patch: [usize; 3],
    count: usize,
    rng: &mut R,
) -> Result<Vec<PatchDraw>> {
    if ds.field_cases.is_empty() {
        return Err(QsmError::param("dataset", "no field cases"));
    }
    (0..count)
        .map(|_| {
            let field_case = rng.random_range(0..ds.field_cases.len());
            let field_origin = origin(ds.field_cases[field_case].field.meta.dims, patch, rng)?;
            let (chi_volume, chi_origin) = if ds.chi_volumes.is_empty() {
                (0, [0; 3])
            } else {
                let i = rng.random_range(0..ds.chi_volumes.len());
                (i, origin(ds.chi_volumes[i].chi.meta.dims, patch, rng)?)
            };
            Ok(PatchDraw {
                field_case,
                field_origin,
                chi_volume,
                chi_origin,
            })
        })
        .collect()
}

pub fn extract_patch(
    data: &[f64],
    meta: &VolumeMeta,
    origin: [usize; 3],
    patch: [usize; 3],
) -> Vec<f64> {
    let mut out = Vec::with_capacity(patch.iter().product());
    for z in 0..patch[2] {
        for y in 0..patch[1] {
            let start = meta.index(origin[0], origin[1] + y, origin[2] + z);
            out.extend_from_slice(&data[start..start + patch[0]]);
        }
    }
    out
}

fn bools(m: &[bool]) -> Vec<f64> {
    m.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()
}

/// Samples and cuts `count` patch pairs. The label group is empty when the dataset has no labels.
pub fn sample_patches<R: Rng + ?Sized>(
    ds: &UnpairedDataset,
    patch: [usize; 3],
    count: usize,
    rng: &mut R,
) -> Result<Vec<PatchPair>> {
    let draws = draw_patches(ds, patch, count, rng)?;
    Ok(draws.iter().map(|d| cut(ds, d, patch)).collect())
}

pub(super) fn cut(ds: &UnpairedDataset, d: &PatchDraw, patch: [usize; 3]) -> PatchPair {
    let c = &ds.field_cases[d.field_case];
    let meta = &c.field.meta;
    let field = PatchGroup {
        dims: patch,
        channels: vec![
            extract_patch(&c.field.data, meta, d.field_origin, patch),
            extract_patch(&c.magnitude.data, meta, d.field_origin, patch),
            extract_patch(&bools(&c.mask.data), meta, d.field_origin, patch),
        ],
    };
    let chi = match ds.chi_volumes.get(d.chi_volume) {
        Some(l) => PatchGroup {
            dims: patch,
            channels: vec![
                extract_patch(&l.chi.data, &l.chi.meta, d.chi_origin, patch),
                extract_patch(&bools(&l.mask.data), &l.chi.meta, d.chi_origin, patch),
            ],
        },
        None => PatchGroup {
            dims: patch,
            channels: Vec::new(),
        },
    };
    PatchPair { field, chi }
}

/// Flips per axis, then `quarter_turns` 90 degree rotations about the B0 axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Augmentation {
    pub flips: [bool; 3],
    pub quarter_turns: u8,
}

impl Augmentation {
    /// Draws the coins and the rotation, then drops whatever would change the dipole physics:
    /// every rotation when B0 is oblique, and flips along axes that B0 has a component on.
    pub fn draw<R: Rng + ?Sized>(rng: &mut R, b0_dir: [f64; 3]) -> Self {
        let mut flips = [
            rng.random_bool(0.5),
            rng.random_bool(0.5),
            rng.random_bool(0.5),
        ];
        let mut quarter_turns = rng.random_range(0..4u8);
        let aligned = b0_dir.iter().filter(|c| c.abs() > 1e-12).count() <= 1;
        if !aligned {
            if quarter_turns != 0 || flips.iter().any(|&f| f) {
                info!("B0 {b0_dir:?} is not axis-aligned; rotation and along-B0 flips skipped");
            }
            quarter_turns = 0;
            for a in 0..3 {
                if b0_dir[a].abs() > 1e-12 {
                    flips[a] = false;
                }
            }
        }
        Self {
            flips,
            quarter_turns,
        }
    }
}

fn flip(v: &[f64], dims: [usize; 3], axis: usize) -> Vec<f64> {
    let mut out = vec![0.0; v.len()];
    let [nx, ny, nz] = dims;
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let mut s = [x, y, z];
                s[axis] = dims[axis] - 1 - s[axis];
                out[x + nx * (y + ny * z)] = v[s[0] + nx * (s[1] + ny * s[2])];
            }
        }
    }
    out
}

/// One quarter turn in the plane of axes `(p, q)`: `out[p, q] = in[q', n - 1 - p]` with
/// `q' = p`, i.e. the point `(i, j)` moves to `(n - 1 - j, i)`.
fn rotate(v: &[f64], dims: [usize; 3], p: usize, q: usize) -> Vec<f64> {
    let mut out = vec![0.0; v.len()];
    let [nx, ny, nz] = dims;
    let n = dims[p];
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let dst = [x, y, z];
                let mut src = dst;
                src[p] = dst[q];
                src[q] = n - 1 - dst[p];
                out[x + nx * (y + ny * z)] = v[src[0] + nx * (src[1] + ny * src[2])];
            }
        }
    }
    out
}

/// Applies `aug` identically to every channel of the group.
///
/// Rotations need a square cross-section perpendicular to B0; `b0_axis = None` skips them.
pub fn augment(
    group: &PatchGroup,
    aug: Augmentation,
    b0_axis: Option<usize>,
) -> Result<PatchGroup> {
    let dims = group.dims;
    let turns = match b0_axis {
        Some(_) => aug.quarter_turns % 4,
        None => {
            if !aug.quarter_turns.is_multiple_of(4) {
                info!("no axis-aligned B0; rotation skipped");
            }
            0
        }
    };
    let plane = b0_axis.map(|a| match a {
        0 => (1, 2),
        1 => (2, 0),
        _ => (0, 1),
    });
    if let (Some((p, q)), true) = (plane, turns != 0) {
        if dims[p] != dims[q] {
            return Err(QsmError::Shape(format!(
                "rotation needs a square cross-section, patch is {dims:?}"
            )));
        }
    }
    let channels = group
        .channels
        .iter()
        .map(|c| {
            let mut v = c.clone();
            for a in 0..3 {
                if aug.flips[a] {
                    v = flip(&v, dims, a);
                }
            }
            if let Some((p, q)) = plane {
                for _ in 0..turns {
                    v = rotate(&v, dims, p, q);
                }
            }
            v
        })
        .collect();
    Ok(PatchGroup { dims, channels })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::SimulatedCase;
    use crate::training::ChiLabel;
    use crate::volume::{Mask, RealVolume};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ramp(dims: [usize; 3]) -> RealVolume {
        let meta = VolumeMeta::isotropic(dims);
        RealVolume::from_fn(meta, |x, y, z| (x + 100 * y + 10_000 * z) as f64)
    }

    fn dataset(dims: [usize; 3]) -> UnpairedDataset {
        let v = ramp(dims);
        let mask = Mask::full(v.meta);
        UnpairedDataset {
            field_cases: vec![SimulatedCase {
                chi: v.clone(),
                field: v.clone(),
                magnitude: v.clone(),
                mask: mask.clone(),
                noise_sigma: 0.0,
            }],
            chi_volumes: vec![ChiLabel { chi: v, mask }],
        }
    }

    #[test]
    fn whole_volume_patch_is_the_volume() {
        let ds = dataset([4, 4, 4]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = sample_patches(&ds, [4, 4, 4], 3, &mut rng).unwrap();
        for pair in p {
            assert_eq!(pair.field.channels[0], ds.field_cases[0].field.data);
            assert_eq!(pair.chi.channels[0], ds.chi_volumes[0].chi.data);
        }
        assert!(sample_patches(&ds, [5, 4, 4], 1, &mut rng).is_err());
    }

    #[test]
    fn extraction_reads_the_right_voxels() {
        let ds = dataset([6, 5, 7]);
        let meta = ds.field_cases[0].field.meta;
        let p = extract_patch(&ds.field_cases[0].field.data, &meta, [1, 2, 3], [2, 2, 2]);
        assert_eq!(p[0], 1.0 + 200.0 + 30_000.0);
        assert_eq!(p[7], 2.0 + 300.0 + 40_000.0);
    }

    #[test]
    fn same_seed_same_patches() {
        let ds = dataset([10, 9, 8]);
        let a = draw_patches(&ds, [4, 4, 4], 50, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let b = draw_patches(&ds, [4, 4, 4], 50, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(a, b);
    }

    fn group(dims: [usize; 3]) -> PatchGroup {
        let n: usize = dims.iter().product();
        PatchGroup {
            dims,
            channels: vec![
                (0..n).map(|i| i as f64).collect(),
                (0..n).map(|i| (i * i) as f64).collect(),
            ],
        }
    }

    #[test]
    fn augment_identities() {
        let g = group([4, 4, 3]);
        assert_eq!(augment(&g, Augmentation::default(), Some(2)).unwrap(), g);
        for a in 0..3 {
            let mut aug = Augmentation::default();
            aug.flips[a] = true;
            let once = augment(&g, aug, Some(2)).unwrap();
            assert_ne!(once, g);
            assert_eq!(augment(&once, aug, Some(2)).unwrap(), g);
        }
        let turn = Augmentation {
            flips: [false; 3],
            quarter_turns: 1,
        };
        let mut r = g.clone();
        for k in 0..4 {
            if k > 0 {
                assert_ne!(r, g);
            }
            r = augment(&r, turn, Some(2)).unwrap();
        }
        assert_eq!(r, g);
        assert!(
            augment(&g, turn, Some(0)).is_err(),
            "4x3 plane cannot rotate"
        );
        assert_eq!(augment(&g, turn, None).unwrap(), g);
    }

    #[test]
    fn rotation_keeps_b0_axis_and_moves_points() {
        let dims = [3, 3, 2];
        let mut v = vec![0.0; 18];
        v[1 + 9] = 1.0; // (1, 0, 1)
        let g = PatchGroup {
            dims,
            channels: vec![v],
        };
        let r = augment(
            &g,
            Augmentation {
                flips: [false; 3],
                quarter_turns: 1,
            },
            Some(2),
        )
        .unwrap();
        let hit = r.channels[0].iter().position(|&x| x == 1.0).unwrap();
        // (i, j) -> (n - 1 - j, i): (1, 0) -> (2, 1), z unchanged.
        assert_eq!(hit, 2 + 3 + 9);
    }

    #[test]
    fn oblique_b0_drops_rotation() {
        let b0 = [0.0, 0.6, 0.8];
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let a = Augmentation::draw(&mut rng, b0);
            assert_eq!(a.quarter_turns, 0);
            assert!(!a.flips[1] && !a.flips[2]);
        }
        let mut seen = [false; 4];
        for _ in 0..100 {
            seen[Augmentation::draw(&mut rng, [0.0, 0.0, 1.0]).quarter_turns as usize] = true;
        }
        assert_eq!(seen, [true; 4]);
    }

    #[test]
    fn origins_are_uniform() {
        use statrs::distribution::{ChiSquared, ContinuousCDF};
        let ds = dataset([7, 6, 5]);
        let patch = [3, 3, 3];
        let cells = 5 * 4 * 3;
        let mut counts = vec![0usize; cells];
        let draws = 10_000;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for d in draw_patches(&ds, patch, draws, &mut rng).unwrap() {
            let o = d.field_origin;
            counts[o[0] + 5 * (o[1] + 4 * o[2])] += 1;
        }
        let expected = draws as f64 / cells as f64;
        let stat: f64 = counts
            .iter()
            .map(|&c| (c as f64 - expected).powi(2) / expected)
            .sum();
        let p = 1.0 - ChiSquared::new((cells - 1) as f64).unwrap().cdf(stat);
        assert!(p > 0.01, "chi2 = {stat}, p = {p}");
    }
}
