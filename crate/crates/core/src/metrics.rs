//! Image-quality and ROI statistics for reconstructed susceptibility maps.

use serde::{Deserialize, Serialize};

use crate::error::{QsmError, Result};
use crate::volume::{Mask, RealVolume};

fn check_pair(truth: &RealVolume, recon: &RealVolume, mask: Option<&Mask>) -> Result<()> {
    truth.meta.ensure_same(&recon.meta, "reconstruction")?;
    if let Some(m) = mask {
        truth.meta.ensure_same(&m.meta, "mask")?;
    }
    Ok(())
}

fn selected<'a>(mask: Option<&'a Mask>, n: usize) -> impl Iterator<Item = usize> + 'a {
    (0..n).filter(move |&i| mask.is_none_or(|m| m.data[i]))
}

/// Root-mean-square error over the mask, in the units of the inputs.
pub fn rmse_abs(truth: &RealVolume, recon: &RealVolume, mask: &Mask) -> Result<f64> {
    check_pair(truth, recon, Some(mask))?;
    let n = mask.count();
    if n == 0 {
        return Err(QsmError::param("mask", "is empty"));
    }
    let ss: f64 = selected(Some(mask), truth.data.len())
        .map(|i| (truth.data[i] - recon.data[i]).powi(2))
        .sum();
    Ok((ss / n as f64).sqrt())
}

/// Normalized RMSE in percent: `100 * ||truth - recon|| / ||truth||` over the mask, i.e. the
/// RMSE divided by the RMS of the truth.
pub fn rmse(truth: &RealVolume, recon: &RealVolume, mask: &Mask) -> Result<f64> {
    let err = rmse_abs(truth, recon, mask)?;
    let zero = RealVolume::zeros(truth.meta);
    let scale = rmse_abs(truth, &zero, mask)?;
    if scale == 0.0 {
        return Err(QsmError::param(
            "truth",
            "is identically zero inside the mask",
        ));
    }
    Ok(100.0 * err / scale)
}

/// Peak signal-to-noise ratio in dB. `peak` defaults to `max |truth|` over the evaluated voxels;
/// a perfect reconstruction yields `f64::INFINITY`.
pub fn psnr(
    truth: &RealVolume,
    recon: &RealVolume,
    mask: Option<&Mask>,
    peak: Option<f64>,
) -> Result<f64> {
    check_pair(truth, recon, mask)?;
    let idx: Vec<usize> = selected(mask, truth.data.len()).collect();
    if idx.is_empty() {
        return Err(QsmError::param("mask", "is empty"));
    }
    let mse = idx
        .iter()
        .map(|&i| (truth.data[i] - recon.data[i]).powi(2))
        .sum::<f64>()
        / idx.len() as f64;
    let peak = match peak {
        Some(p) if p > 0.0 && p.is_finite() => p,
        Some(p) => {
            return Err(QsmError::param(
                "peak",
                format!("must be positive, got {p}"),
            ))
        }
        None => idx.iter().map(|&i| truth.data[i].abs()).fold(0.0, f64::max),
    };
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    if peak == 0.0 {
        return Err(QsmError::param("truth", "has zero peak"));
    }
    Ok(10.0 * (peak * peak / mse).log10())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SsimParams {
    pub window: usize,
    pub k1: f64,
    pub k2: f64,
}

impl Default for SsimParams {
    fn default() -> Self {
        Self {
            window: 7,
            k1: 0.01,
            k2: 0.03,
        }
    }
}

/// Inclusive prefix sums over a 3-D grid with a zero border, for O(1) box sums.
struct BoxSums {
    dims: [usize; 3],
    table: Vec<f64>,
}

impl BoxSums {
    fn new(dims: [usize; 3], v: impl Fn(usize) -> f64) -> Self {
        let [nx, ny, nz] = dims;
        let (sx, sy) = (nx + 1, ny + 1);
        let mut table = vec![0.0; sx * sy * (nz + 1)];
        let at = |x: usize, y: usize, z: usize| (z * sy + y) * sx + x;
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    let s = v((z * ny + y) * nx + x)
                        + table[at(x, y + 1, z + 1)]
                        + table[at(x + 1, y, z + 1)]
                        + table[at(x + 1, y + 1, z)]
                        - table[at(x, y, z + 1)]
                        - table[at(x, y + 1, z)]
                        - table[at(x + 1, y, z)]
                        + table[at(x, y, z)];
                    table[at(x + 1, y + 1, z + 1)] = s;
                }
            }
        }
        Self { dims, table }
    }

    /// Sum over `lo[a] <= i < hi[a]`.
    fn sum(&self, lo: [usize; 3], hi: [usize; 3]) -> f64 {
        let (sx, sy) = (self.dims[0] + 1, self.dims[1] + 1);
        let t = |x: usize, y: usize, z: usize| self.table[(z * sy + y) * sx + x];
        t(hi[0], hi[1], hi[2])
            - t(lo[0], hi[1], hi[2])
            - t(hi[0], lo[1], hi[2])
            - t(hi[0], hi[1], lo[2])
            + t(lo[0], lo[1], hi[2])
            + t(lo[0], hi[1], lo[2])
            + t(hi[0], lo[1], lo[2])
            - t(lo[0], lo[1], lo[2])
    }
}

/// Mean local SSIM with a uniform cubic window.
///
/// Windows are centered on voxels where the full window fits (and, with a mask, on mask
/// voxels). Axes of length 1 are degenerate: the window has extent 1 along them, so a single
/// slice is handled as a 2-D image. Local variances use the unbiased `N - 1` normalization.
/// The dynamic range is `max - min` of the truth over the mask (or the whole volume).
pub fn ssim3(
    truth: &RealVolume,
    recon: &RealVolume,
    mask: Option<&Mask>,
    p: SsimParams,
) -> Result<f64> {
    check_pair(truth, recon, mask)?;
    if p.window == 0 || p.window.is_multiple_of(2) {
        return Err(QsmError::param(
            "window",
            format!("must be odd and positive, got {}", p.window),
        ));
    }
    let dims = truth.meta.dims;
    let ext = dims.map(|n| if n == 1 { 1 } else { p.window });
    if let Some(a) = (0..3).find(|&a| ext[a] > dims[a]) {
        return Err(QsmError::param(
            "window",
            format!(
                "{} exceeds volume dimension {} on axis {a}",
                p.window, dims[a]
            ),
        ));
    }
    let idx: Vec<usize> = selected(mask, truth.data.len()).collect();
    let (lo_v, hi_v) = idx
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &i| {
            (lo.min(truth.data[i]), hi.max(truth.data[i]))
        });
    let range = hi_v - lo_v;
    let c1 = (p.k1 * range).powi(2);
    let c2 = (p.k2 * range).powi(2);
    let (x, y) = (&truth.data, &recon.data);
    let sx = BoxSums::new(dims, |i| x[i]);
    let sy = BoxSums::new(dims, |i| y[i]);
    let sxx = BoxSums::new(dims, |i| x[i] * x[i]);
    let syy = BoxSums::new(dims, |i| y[i] * y[i]);
    let sxy = BoxSums::new(dims, |i| x[i] * y[i]);
    let half = ext.map(|e| e / 2);
    let np: f64 = ext.iter().product::<usize>() as f64;
    let unbias = if np > 1.0 { np / (np - 1.0) } else { 1.0 };
    let mut total = 0.0;
    let mut count = 0usize;
    for z in half[2]..dims[2] - half[2] {
        for yy in half[1]..dims[1] - half[1] {
            for xx in half[0]..dims[0] - half[0] {
                let i = truth.meta.index(xx, yy, z);
                if mask.is_some_and(|m| !m.data[i]) {
                    continue;
                }
                let c = [xx, yy, z];
                let lo = [0, 1, 2].map(|a| c[a] - half[a]);
                let hi = [0, 1, 2].map(|a| c[a] + half[a] + 1);
                let mx = sx.sum(lo, hi) / np;
                let my = sy.sum(lo, hi) / np;
                let vx = (sxx.sum(lo, hi) / np - mx * mx) * unbias;
                let vy = (syy.sum(lo, hi) / np - my * my) * unbias;
                let cxy = (sxy.sum(lo, hi) / np - mx * my) * unbias;
                let num = (2.0 * mx * my + c1) * (2.0 * cxy + c2);
                let den = (mx * mx + my * my + c1) * (vx + vy + c2);
                total += if den == 0.0 { 1.0 } else { num / den };
                count += 1;
            }
        }
    }
    if count == 0 {
        return Err(QsmError::param(
            "mask",
            "contains no voxel where the window fits",
        ));
    }
    Ok(total / count as f64)
}

/// Named regions of interest on a common grid.
#[derive(Debug, Clone)]
pub struct RoiSet {
    rois: Vec<(String, Mask)>,
}

impl RoiSet {
    pub fn new(rois: Vec<(String, Mask)>) -> Result<Self> {
        if let Some((_, first)) = rois.first() {
            for (i, (name, m)) in rois.iter().enumerate() {
                first.meta.ensure_same(&m.meta, "roi")?;
                if rois[..i].iter().any(|(n, _)| n == name) {
                    return Err(QsmError::param("rois", format!("duplicate name {name:?}")));
                }
            }
        }
        Ok(Self { rois })
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Mask)> {
        self.rois.iter().map(|(n, m)| (n.as_str(), m))
    }

    pub fn len(&self) -> usize {
        self.rois.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rois.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RegressionMode {
    /// Every ROI voxel is one (truth, recon) point.
    #[default]
    Pooled,
    /// One point per ROI: the ROI means.
    Means,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegressionResult {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
    pub corr: f64,
    pub mean_abs_error: f64,
    pub std_abs_error: f64,
    pub points: usize,
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
    (m, var.sqrt())
}

/// Ordinary least squares of `recon` on `truth`, Pearson correlation, and the mean and
/// (population) standard deviation of `|truth - recon|`.
pub fn regress(points: &[(f64, f64)]) -> Result<RegressionResult> {
    if points.len() < 2 {
        return Err(QsmError::param(
            "rois",
            format!("need at least 2 points, got {}", points.len()),
        ));
    }
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = points.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let syy: f64 = points.iter().map(|p| (p.1 - my).powi(2)).sum();
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    if sxx == 0.0 {
        return Err(QsmError::param(
            "truth",
            "is constant over the ROIs; slope undefined",
        ));
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let corr = if syy == 0.0 {
        0.0
    } else {
        (sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0)
    };
    let errors: Vec<f64> = points.iter().map(|p| (p.0 - p.1).abs()).collect();
    let (mean_abs_error, std_abs_error) = mean_std(&errors);
    Ok(RegressionResult {
        slope,
        intercept,
        r_squared: corr * corr,
        corr,
        mean_abs_error,
        std_abs_error,
        points: points.len(),
    })
}

pub fn roi_regression(
    truth: &RealVolume,
    recon: &RealVolume,
    rois: &RoiSet,
    mode: RegressionMode,
) -> Result<RegressionResult> {
    truth.meta.ensure_same(&recon.meta, "reconstruction")?;
    let mut points = Vec::new();
    for (name, m) in rois.iter() {
        truth.meta.ensure_same(&m.meta, "roi")?;
        let idx: Vec<usize> = selected(Some(m), truth.data.len()).collect();
        if idx.is_empty() {
            return Err(QsmError::param("rois", format!("roi {name:?} is empty")));
        }
        match mode {
            RegressionMode::Pooled => {
                points.extend(idx.iter().map(|&i| (truth.data[i], recon.data[i])))
            }
            RegressionMode::Means => {
                let k = idx.len() as f64;
                let t = idx.iter().map(|&i| truth.data[i]).sum::<f64>() / k;
                let r = idx.iter().map(|&i| recon.data[i]).sum::<f64>() / k;
                points.push((t, r));
            }
        }
    }
    regress(&points)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoiStat {
    pub name: String,
    pub mean: f64,
    pub std: f64,
    pub voxels: usize,
}

/// Per-ROI mean and population standard deviation.
pub fn roi_means(recon: &RealVolume, rois: &RoiSet) -> Result<Vec<RoiStat>> {
    rois.iter()
        .map(|(name, m)| {
            recon.meta.ensure_same(&m.meta, "roi")?;
            let v: Vec<f64> = selected(Some(m), recon.data.len())
                .map(|i| recon.data[i])
                .collect();
            if v.is_empty() {
                return Err(QsmError::param("rois", format!("roi {name:?} is empty")));
            }
            let (mean, std) = mean_std(&v);
            Ok(RoiStat {
                name: name.to_string(),
                mean,
                std,
                voxels: v.len(),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::VolumeMeta;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(meta: VolumeMeta, seed: u64) -> RealVolume {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        RealVolume::from_fn(meta, |_, _, _| rng.random_range(-1.0..1.0))
    }

    fn random_mask(meta: VolumeMeta, seed: u64) -> Mask {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut d: Vec<bool> = (0..meta.len()).map(|_| rng.random_bool(0.5)).collect();
        d[0] = true;
        Mask::new(meta, d).unwrap()
    }

    #[test]
    fn rmse_identities_and_loop_oracle() {
        let meta = VolumeMeta::isotropic([8, 8, 8]);
        let t = random(meta, 1);
        let m = random_mask(meta, 2);
        assert_eq!(rmse_abs(&t, &t, &m).unwrap(), 0.0);
        assert!((rmse_abs(&t, &t.map(|v| v + 0.25), &m).unwrap() - 0.25).abs() < 1e-12);
        let r = random(meta, 3);
        let (mut ss, mut tt, mut n) = (0.0, 0.0, 0.0);
        for z in 0..8 {
            for y in 0..8 {
                for x in 0..8 {
                    let i = meta.index(x, y, z);
                    if m.data[i] {
                        ss += (t.at(x, y, z) - r.at(x, y, z)).powi(2);
                        tt += t.at(x, y, z).powi(2);
                        n += 1.0;
                    }
                }
            }
        }
        assert!((rmse_abs(&t, &r, &m).unwrap() - (ss / n).sqrt()).abs() < 1e-12);
        assert!((rmse(&t, &r, &m).unwrap() - 100.0 * (ss / tt).sqrt()).abs() < 1e-10);
    }

    #[test]
    fn psnr_identities() {
        let meta = VolumeMeta::isotropic([4, 4, 4]);
        let t = random(meta, 1);
        assert_eq!(psnr(&t, &t, None, None).unwrap(), f64::INFINITY);
        // Error of magnitude `peak` everywhere gives MSE = peak^2, i.e. 0 dB.
        let r = t.map(|v| v + 2.0);
        assert!(psnr(&t, &r, None, Some(2.0)).unwrap().abs() < 1e-12);
        let r = random(meta, 2);
        let m = random_mask(meta, 3);
        let idx: Vec<usize> = (0..meta.len()).filter(|&i| m.data[i]).collect();
        let mse = idx
            .iter()
            .map(|&i| (t.data[i] - r.data[i]).powi(2))
            .sum::<f64>()
            / idx.len() as f64;
        let peak = idx.iter().map(|&i| t.data[i].abs()).fold(0.0, f64::max);
        let want = 10.0 * (peak * peak / mse).log10();
        assert!((psnr(&t, &r, Some(&m), None).unwrap() - want).abs() < 1e-9);
    }

    #[test]
    fn psnr_decreases_with_noise() {
        let meta = VolumeMeta::isotropic([8, 8, 8]);
        let t = random(meta, 1);
        let mut wins = 0;
        for seed in 0..5 {
            let n = random(meta, 100 + seed);
            let a = psnr(&t, &t.zip_map(&n, |x, e| x + 0.01 * e), None, None).unwrap();
            let b = psnr(&t, &t.zip_map(&n, |x, e| x + 0.05 * e), None, None).unwrap();
            wins += usize::from(b < a);
        }
        assert!(wins >= 3);
    }

    #[test]
    fn ssim_self_is_one_and_negation_is_less() {
        let meta = VolumeMeta::isotropic([9, 8, 10]);
        let t = random(meta, 4);
        let s = ssim3(&t, &t, None, SsimParams::default()).unwrap();
        assert!((s - 1.0).abs() < 1e-12);
        assert!(ssim3(&t, &t.map(|v| -v), None, SsimParams::default()).unwrap() < 1.0);
        let small = VolumeMeta::isotropic([5, 8, 8]);
        assert!(ssim3(
            &random(small, 1),
            &random(small, 1),
            None,
            SsimParams::default()
        )
        .is_err());
    }

    #[test]
    fn ssim_single_window_by_hand() {
        // A 3x3x1 slice holds exactly one 3x3 window. truth = 0..9, recon = truth with the
        // last value 8 -> 9. Range L = 8, so C1 = (0.08)^2 = 0.0064, C2 = (0.24)^2 = 0.0576.
        let meta = VolumeMeta::isotropic([3, 3, 1]);
        let t = RealVolume::new(meta, (0..9).map(f64::from).collect()).unwrap();
        let mut r = t.clone();
        r.data[8] = 9.0;
        let p = SsimParams {
            window: 3,
            ..SsimParams::default()
        };
        // x = 0..8: sum x = 36, sum x^2 = 204. y: sum 37, sum y^2 = 204 - 64 + 81 = 221, sum xy = 204 - 64 + 72 = 212.
        let (mx, my): (f64, f64) = (4.0, 37.0 / 9.0);
        let vx = (204.0 - 9.0 * mx * mx) / 8.0;
        let vy = (221.0 - 9.0 * my * my) / 8.0;
        let cxy = (212.0 - 9.0 * mx * my) / 8.0;
        let (c1, c2) = (0.0064, 0.0576);
        let want =
            (2.0 * mx * my + c1) * (2.0 * cxy + c2) / ((mx * mx + my * my + c1) * (vx + vy + c2));
        assert!((vx - 7.5).abs() < 1e-12);
        let got = ssim3(&t, &r, None, p).unwrap();
        assert!((got - want).abs() < 1e-6, "{got} vs {want}");
        assert!((want - 0.992755).abs() < 1e-6, "{want}");
    }

    #[test]
    fn box_sums_match_direct_sums() {
        let meta = VolumeMeta::isotropic([5, 4, 3]);
        let v = random(meta, 8);
        let b = BoxSums::new(meta.dims, |i| v.data[i]);
        let (lo, hi) = ([1, 0, 1], [4, 3, 3]);
        let mut s = 0.0;
        for z in lo[2]..hi[2] {
            for y in lo[1]..hi[1] {
                for x in lo[0]..hi[0] {
                    s += v.at(x, y, z);
                }
            }
        }
        assert!((b.sum(lo, hi) - s).abs() < 1e-12);
    }

    fn two_rois(meta: VolumeMeta) -> RoiSet {
        let a = Mask::new(meta, (0..meta.len()).map(|i| i % 3 == 0).collect()).unwrap();
        let b = Mask::new(meta, (0..meta.len()).map(|i| i % 5 == 1).collect()).unwrap();
        RoiSet::new(vec![("a".into(), a), ("b".into(), b)]).unwrap()
    }

    #[test]
    fn regression_exact_maps() {
        let meta = VolumeMeta::isotropic([6, 6, 6]);
        let t = random(meta, 1);
        let rois = two_rois(meta);
        let r = roi_regression(&t, &t, &rois, RegressionMode::Pooled).unwrap();
        assert!((r.slope - 1.0).abs() < 1e-12 && (r.r_squared - 1.0).abs() < 1e-12);
        assert!((r.corr - 1.0).abs() < 1e-12 && r.mean_abs_error == 0.0);
        let half = t.map(|v| 0.5 * v);
        let r = roi_regression(&t, &half, &rois, RegressionMode::Pooled).unwrap();
        assert!((r.slope - 0.5).abs() < 1e-12 && (r.corr - 1.0).abs() < 1e-12);
    }

    #[test]
    fn regression_matches_normal_equations() {
        let meta = VolumeMeta::isotropic([6, 6, 6]);
        let t = random(meta, 1);
        let r = random(meta, 2);
        let rois = two_rois(meta);
        let got = roi_regression(&t, &r, &rois, RegressionMode::Pooled).unwrap();
        // Normal equations [n sx; sx sxx] [b; a] = [sy; sxy], solved by Cramer's rule.
        let pts: Vec<(f64, f64)> = rois
            .iter()
            .flat_map(|(_, m)| {
                (0..meta.len())
                    .filter(|&i| m.data[i])
                    .map(|i| (t.data[i], r.data[i]))
                    .collect::<Vec<_>>()
            })
            .collect();
        let n = pts.len() as f64;
        let sx: f64 = pts.iter().map(|p| p.0).sum();
        let sy: f64 = pts.iter().map(|p| p.1).sum();
        let sxx: f64 = pts.iter().map(|p| p.0 * p.0).sum();
        let sxy: f64 = pts.iter().map(|p| p.0 * p.1).sum();
        let det = n * sxx - sx * sx;
        let a = (n * sxy - sx * sy) / det;
        let b = (sxx * sy - sx * sxy) / det;
        assert!((got.slope - a).abs() < 1e-10 && (got.intercept - b).abs() < 1e-10);
        assert_eq!(got.points, pts.len());
    }

    #[test]
    fn duplicated_points_keep_the_slope() {
        let pts = vec![(0.0, 0.1), (1.0, 0.8), (2.0, 2.3), (3.0, 2.9)];
        let mut dup = pts.clone();
        dup.extend_from_slice(&pts);
        let a = regress(&pts).unwrap();
        let b = regress(&dup).unwrap();
        assert!((a.slope - b.slope).abs() < 1e-12);
        assert!(regress(&pts[..1]).is_err());
    }

    #[test]
    fn roi_means_constant_and_empty() {
        let meta = VolumeMeta::isotropic([4, 4, 4]);
        let v = RealVolume::constant(meta, 0.3);
        let rois = two_rois(meta);
        for s in roi_means(&v, &rois).unwrap() {
            assert!((s.mean - 0.3).abs() < 1e-15 && s.std < 1e-15);
        }
        let t = random(meta, 5);
        let stats = roi_means(&t, &rois).unwrap();
        let (_, m) = rois.iter().next().unwrap();
        let vals: Vec<f64> = (0..meta.len())
            .filter(|&i| m.data[i])
            .map(|i| t.data[i])
            .collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        assert!((stats[0].mean - mean).abs() < 1e-12);
        let dup = Mask::full(meta);
        assert!(RoiSet::new(vec![("a".into(), dup.clone()), ("a".into(), dup)]).is_err());
    }
}
