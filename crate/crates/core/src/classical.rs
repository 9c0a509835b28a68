//! Non-learning inversions: thresholded k-space division, an edge-weighted TV
//! reconstruction solved by gradient descent, and CG least squares.

use log::warn;
use serde::{Deserialize, Serialize};

use crate::dipole::{real_checked, spectral_apply, DipoleKernel, DipoleOperator};
use crate::error::{QsmError, Result};
use crate::volume::{div3_slice, grad3_slice, Mask, RealVolume};

/// Smoothing of `|t|` as `sqrt(t^2 + eps^2)` in the regularizer.
pub const L1_SMOOTHING: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TkdParams {
    pub a: f64,
}

impl Default for TkdParams {
    fn default() -> Self {
        Self { a: 0.1 }
    }
}

impl TkdParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.a > 0.0 && self.a < 2.0 / 3.0) {
            return Err(QsmError::param(
                "a",
                format!("must lie in (0, 2/3), got {}", self.a),
            ));
        }
        Ok(())
    }
}

/// Kernel value used by TKD: `d` where `|d| > a`, otherwise `a * sign(d)` with `sign(0) = +1`.
pub fn truncated_kernel(d: f64, a: f64) -> f64 {
    if d.abs() > a {
        d
    } else if d < 0.0 {
        -a
    } else {
        a
    }
}

pub fn tkd_invert(b: &RealVolume, kernel: &DipoleKernel, p: TkdParams) -> Result<RealVolume> {
    p.validate()?;
    b.meta.ensure_same(&kernel.meta, "tkd_invert")?;
    let buf = spectral_apply(b, |i| 1.0 / truncated_kernel(kernel.spectrum[i], p.a))?;
    real_checked(buf, b.meta, b.max_abs() / p.a)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MediParams {
    pub lambda: f64,
    pub edge_fraction: f64,
    pub iters: usize,
    /// Initial trial step; later trial steps use the Barzilai-Borwein length.
    pub step: f64,
}

impl Default for MediParams {
    fn default() -> Self {
        Self {
            lambda: 600.0,
            edge_fraction: 0.3,
            iters: 300,
            step: 1.0,
        }
    }
}

impl MediParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(QsmError::param(
                "lambda",
                format!("must be >= 0, got {}", self.lambda),
            ));
        }
        if !(self.edge_fraction > 0.0 && self.edge_fraction < 1.0) {
            return Err(QsmError::param(
                "edge_fraction",
                format!("must lie in (0, 1), got {}", self.edge_fraction),
            ));
        }
        if self.iters == 0 {
            return Err(QsmError::param("iters", "must be positive"));
        }
        if !(self.step > 0.0 && self.step.is_finite()) {
            return Err(QsmError::param(
                "step",
                format!("must be positive, got {}", self.step),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MediWeights {
    /// Data-fidelity weight, zero outside the mask.
    pub w: RealVolume,
    /// Per gradient component: 1 where the regularizer applies, 0 on magnitude edges.
    pub m: [Vec<bool>; 3],
    /// Set when the magnitude had no edges to detect.
    pub flat: bool,
}

/// Magnitude scaled to mean 1 over the mask and zeroed outside it.
pub fn magnitude_weight(magnitude: &RealVolume, mask: &Mask) -> Result<RealVolume> {
    magnitude.meta.ensure_same(&mask.meta, "mask")?;
    if magnitude.data.iter().any(|&v| v < 0.0) {
        return Err(QsmError::param("magnitude", "must be non-negative"));
    }
    let n = mask.count();
    let sum: f64 = magnitude
        .data
        .iter()
        .zip(&mask.data)
        .filter(|(_, &m)| m)
        .map(|(v, _)| v)
        .sum();
    if n == 0 || sum <= 0.0 {
        return Err(QsmError::param("magnitude", "is zero over the mask"));
    }
    let mean = sum / n as f64;
    Ok(RealVolume {
        meta: magnitude.meta,
        data: magnitude
            .data
            .iter()
            .zip(&mask.data)
            .map(|(&v, &m)| if m { v / mean } else { 0.0 })
            .collect(),
    })
}

/// Value below which a fraction `1 - f` of `values` lies (nearest-rank).
fn upper_quantile(values: &[f64], f: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    let rank = ((1.0 - f) * n as f64).ceil() as usize;
    v[rank.clamp(1, n) - 1]
}

/// Weights from the magnitude image: `W` is the normalized magnitude; in each gradient component
/// voxels whose `|grad|` exceeds the `1 - edge_fraction` quantile are edges and left unpenalized.
pub fn build_medi_weights(
    magnitude: &RealVolume,
    mask: &Mask,
    edge_fraction: f64,
) -> Result<MediWeights> {
    if !(edge_fraction > 0.0 && edge_fraction < 1.0) {
        return Err(QsmError::param(
            "edge_fraction",
            format!("must lie in (0, 1), got {edge_fraction}"),
        ));
    }
    let w = magnitude_weight(magnitude, mask)?;
    let n = magnitude.data.len();
    let mut g = [vec![0.0; n], vec![0.0; n], vec![0.0; n]];
    {
        let [gx, gy, gz] = &mut g;
        grad3_slice(&magnitude.data, magnitude.meta.dims, gx, gy, gz);
    }
    let flat = g.iter().all(|c| c.iter().all(|&v| v == 0.0));
    if flat {
        warn!("magnitude has no gradient; edge mask is all ones");
    }
    let m = g.map(|c| {
        let abs: Vec<f64> = c.iter().map(|v| v.abs()).collect();
        let thr = upper_quantile(&abs, edge_fraction);
        abs.iter().map(|&a| a <= thr).collect()
    });
    Ok(MediWeights { w, m, flat })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iteration: usize,
    pub objective: f64,
    pub data: f64,
    pub reg: f64,
}

impl TraceRow {
    pub const CSV_HEADER: &'static str = "iteration,objective,data,reg";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{:e},{:e},{:e}",
            self.iteration, self.objective, self.data, self.reg
        )
    }
}

#[derive(Debug, Clone)]
pub struct MediResult {
    pub chi: RealVolume,
    pub trace: Vec<TraceRow>,
}

struct MediProblem<'a> {
    op: DipoleOperator<f64>,
    b: &'a [f64],
    w2: Vec<f64>,
    m: &'a [Vec<bool>; 3],
    lambda: f64,
    dims: [usize; 3],
}

impl MediProblem<'_> {
    /// `(data, reg)` parts of the objective and, on request, its gradient.
    fn eval(&self, chi: &[f64], want_grad: bool) -> (f64, f64, Vec<f64>) {
        let n = chi.len();
        let h = self.op.apply(chi);
        let r: Vec<f64> = h.iter().zip(self.b).map(|(&hv, &bv)| hv - bv).collect();
        let data: f64 = r.iter().zip(&self.w2).map(|(&ri, &w)| w * ri * ri).sum();
        let mut g = [vec![0.0; n], vec![0.0; n], vec![0.0; n]];
        {
            let [gx, gy, gz] = &mut g;
            grad3_slice(chi, self.dims, gx, gy, gz);
        }
        let eps2 = L1_SMOOTHING * L1_SMOOTHING;
        let mut reg = 0.0;
        let mut dual = [vec![0.0; n], vec![0.0; n], vec![0.0; n]];
        for a in 0..3 {
            for i in 0..n {
                let t = if self.m[a][i] { g[a][i] } else { 0.0 };
                let s = (t * t + eps2).sqrt();
                reg += s;
                if self.m[a][i] {
                    dual[a][i] = t / s;
                }
            }
        }
        if !want_grad {
            return (data, reg, Vec::new());
        }
        let wr: Vec<f64> = r
            .iter()
            .zip(&self.w2)
            .map(|(&ri, &w)| 2.0 * w * ri)
            .collect();
        let mut grad = self.op.apply(&wr);
        if self.lambda > 0.0 {
            let mut div = vec![0.0; n];
            div3_slice(&dual[0], &dual[1], &dual[2], self.dims, &mut div);
            for (gi, d) in grad.iter_mut().zip(div) {
                *gi -= self.lambda * d;
            }
        }
        (data, reg, grad)
    }
}

/// Minimizes `||W (b - H chi)||^2 + lambda * sum sqrt((M grad chi)^2 + eps^2)` from `chi = 0`
/// by gradient descent. Trial steps follow Barzilai-Borwein and are halved until the Armijo
/// condition holds, so the recorded objective never increases.
pub fn medi_invert(
    b: &RealVolume,
    kernel: &DipoleKernel,
    weights: &MediWeights,
    p: MediParams,
) -> Result<MediResult> {
    p.validate()?;
    b.meta.ensure_same(&kernel.meta, "medi_invert")?;
    b.meta.ensure_same(&weights.w.meta, "medi weights")?;
    let n = b.data.len();
    if weights.m.iter().any(|c| c.len() != n) {
        return Err(QsmError::DimMismatch("edge mask length".into()));
    }
    let problem = MediProblem {
        op: kernel.operator(),
        b: &b.data,
        w2: weights.w.data.iter().map(|w| w * w).collect(),
        m: &weights.m,
        lambda: p.lambda,
        dims: b.meta.dims,
    };
    let mut chi = vec![0.0; n];
    let (mut data, mut reg, mut grad) = problem.eval(&chi, true);
    let mut obj = data + p.lambda * reg;
    let start = obj;
    let mut trace = vec![TraceRow {
        iteration: 0,
        objective: obj,
        data,
        reg,
    }];
    let mut step = p.step;
    for it in 1..=p.iters {
        let g2: f64 = grad.iter().map(|g| g * g).sum();
        if g2 == 0.0 {
            break;
        }
        let mut accepted = None;
        let mut trial = step;
        for _ in 0..60 {
            let cand: Vec<f64> = chi
                .iter()
                .zip(&grad)
                .map(|(&c, &g)| c - trial * g)
                .collect();
            let (d, r, _) = problem.eval(&cand, false);
            let o = d + p.lambda * r;
            if !o.is_finite() {
                return Err(QsmError::Diverged(format!(
                    "objective is {o} at iteration {it}"
                )));
            }
            if o <= obj - 1e-4 * trial * g2 {
                accepted = Some(cand);
                break;
            }
            trial *= 0.5;
        }
        let Some(next) = accepted else {
            break;
        };
        let (d, r, g_next) = problem.eval(&next, true);
        let o = d + p.lambda * r;
        if o > 10.0 * start.max(f64::MIN_POSITIVE) {
            return Err(QsmError::Diverged(format!(
                "objective grew from {start:e} to {o:e} at iteration {it}"
            )));
        }
        let (mut ss, mut sy) = (0.0, 0.0);
        for i in 0..n {
            let s = next[i] - chi[i];
            ss += s * s;
            sy += s * (g_next[i] - grad[i]);
        }
        step = if sy > 0.0 {
            (ss / sy).clamp(1e-12, 1e12)
        } else {
            trial * 2.0
        };
        chi = next;
        grad = g_next;
        data = d;
        reg = r;
        obj = o;
        trace.push(TraceRow {
            iteration: it,
            objective: obj,
            data,
            reg,
        });
    }
    Ok(MediResult {
        chi: RealVolume {
            meta: b.meta,
            data: chi,
        },
        trace,
    })
}

#[derive(Debug, Clone)]
pub struct CgResult {
    pub chi: RealVolume,
    /// `||W (b - H chi)||` before the first and after every iteration.
    pub residuals: Vec<f64>,
    /// `||H W^2 (b - H chi)||`, the normal-equation residual, per iteration.
    pub normal_residuals: Vec<f64>,
}

/// Conjugate gradients on `H W^2 H chi = H W^2 b` in the CGLS arrangement, which keeps the
/// weighted data residual monotone. Stops when the normal residual falls below
/// `tol` times its initial value.
pub fn cg_least_squares(
    b: &RealVolume,
    kernel: &DipoleKernel,
    w: Option<&RealVolume>,
    iters: usize,
    tol: f64,
) -> Result<CgResult> {
    b.meta.ensure_same(&kernel.meta, "cg_least_squares")?;
    if let Some(w) = w {
        b.meta.ensure_same(&w.meta, "weight")?;
    }
    if !(tol >= 0.0) {
        return Err(QsmError::param("tol", format!("must be >= 0, got {tol}")));
    }
    let n = b.data.len();
    let wv: Vec<f64> = w.map_or_else(|| vec![1.0; n], |w| w.data.clone());
    let op = kernel.operator::<f64>();
    let dot = |a: &[f64], c: &[f64]| a.iter().zip(c).map(|(x, y)| x * y).sum::<f64>();
    let apply_a =
        |x: &[f64]| -> Vec<f64> { op.apply(x).iter().zip(&wv).map(|(h, w)| h * w).collect() };
    let apply_at = |r: &[f64]| -> Vec<f64> {
        let wr: Vec<f64> = r.iter().zip(&wv).map(|(x, w)| x * w).collect();
        op.apply(&wr)
    };
    let mut x = vec![0.0; n];
    let mut r: Vec<f64> = b.data.iter().zip(&wv).map(|(b, w)| b * w).collect();
    let mut s = apply_at(&r);
    let mut p = s.clone();
    let mut gamma = dot(&s, &s);
    let gamma0 = gamma;
    let mut residuals = vec![dot(&r, &r).sqrt()];
    let mut normal_residuals = vec![gamma.sqrt()];
    for _ in 0..iters {
        if gamma <= (tol * tol) * gamma0 || gamma == 0.0 {
            break;
        }
        let q = apply_a(&p);
        let qq = dot(&q, &q);
        if qq == 0.0 {
            break;
        }
        let alpha = gamma / qq;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * q[i];
        }
        s = apply_at(&r);
        let gamma_next = dot(&s, &s);
        residuals.push(dot(&r, &r).sqrt());
        normal_residuals.push(gamma_next.sqrt());
        let beta = gamma_next / gamma;
        for i in 0..n {
            p[i] = s[i] + beta * p[i];
        }
        gamma = gamma_next;
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(QsmError::Diverged("non-finite CG iterate".into()));
    }
    Ok(CgResult {
        chi: RealVolume {
            meta: b.meta,
            data: x,
        },
        residuals,
        normal_residuals,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dipole::tests::band_limited;
    use crate::dipole::{build_dipole, forward_field, naive_inverse};
    use crate::volume::{fft3, VolumeMeta};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rel(a: &RealVolume, b: &RealVolume) -> f64 {
        let d: f64 = a
            .data
            .iter()
            .zip(&b.data)
            .map(|(x, y)| (x - y).powi(2))
            .sum();
        (d / b.norm2().powi(2).max(1e-300)).sqrt()
    }

    fn random(meta: VolumeMeta, seed: u64) -> RealVolume {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        RealVolume::from_fn(meta, |_, _, _| rng.random_range(0.0..1.0))
    }

    #[test]
    fn truncated_kernel_convention() {
        assert_eq!(truncated_kernel(0.0, 0.1), 0.1);
        assert_eq!(truncated_kernel(-0.05, 0.1), -0.1);
        assert_eq!(truncated_kernel(0.05, 0.1), 0.1);
        assert_eq!(truncated_kernel(-0.5, 0.1), -0.5);
    }

    #[test]
    fn tkd_recovers_band_limited_and_zero() {
        let meta = VolumeMeta::new([16, 12, 10], [1.0, 1.2, 0.9], [0.0, 0.0, 1.0]).unwrap();
        let k = build_dipole(meta).unwrap();
        let chi = band_limited(&k, 0.1, 4);
        let b = forward_field(&chi, &k).unwrap();
        let x = tkd_invert(&b, &k, TkdParams::default()).unwrap();
        assert!(rel(&x, &chi) < 1e-8, "{}", rel(&x, &chi));
        let zero = tkd_invert(&RealVolume::zeros(meta), &k, TkdParams::default()).unwrap();
        assert!(zero.data.iter().all(|&v| v == 0.0));
        assert!(tkd_invert(&b, &k, TkdParams { a: 0.7 }).is_err());
        assert!(tkd_invert(&b, &k, TkdParams { a: 0.0 }).is_err());
    }

    #[test]
    fn tkd_agrees_with_naive_off_the_threshold_band() {
        let meta = VolumeMeta::isotropic([12, 12, 12]);
        let k = build_dipole(meta).unwrap();
        let b = random(meta, 3);
        let t = fft3(&tkd_invert(&b, &k, TkdParams { a: 0.1 }).unwrap()).unwrap();
        let n = fft3(&naive_inverse(&b, &k, 0.1).unwrap()).unwrap();
        let scale = t.data.iter().map(|c| c.norm()).fold(0.0, f64::max);
        for i in 0..meta.len() {
            if k.spectrum[i].abs() > 0.1 {
                assert!((t.data[i] - n.data[i]).norm() < 1e-12 * scale);
            }
        }
    }

    #[test]
    fn flat_magnitude_gives_unit_weights() {
        let meta = VolumeMeta::isotropic([6, 6, 6]);
        let w =
            build_medi_weights(&RealVolume::constant(meta, 1.0), &Mask::full(meta), 0.3).unwrap();
        assert!(w.flat);
        assert!(w.w.data.iter().all(|&v| v == 1.0));
        assert!(w.m.iter().all(|c| c.iter().all(|&b| b)));
    }

    #[test]
    fn step_edge_is_the_only_edge() {
        let meta = VolumeMeta::isotropic([8, 6, 6]);
        let mag = RealVolume::from_fn(meta, |x, _, _| if x >= 4 { 2.0 } else { 1.0 });
        let w = build_medi_weights(&mag, &Mask::full(meta), 0.3).unwrap();
        for z in 0..6 {
            for y in 0..6 {
                for x in 0..8 {
                    let i = meta.index(x, y, z);
                    assert_eq!(w.m[0][i], x != 3);
                    assert!(w.m[1][i] && w.m[2][i]);
                }
            }
        }
        assert!(!w.flat);
    }

    #[test]
    fn random_magnitude_edge_fraction() {
        let meta = VolumeMeta::isotropic([16, 16, 16]);
        let w = build_medi_weights(&random(meta, 9), &Mask::full(meta), 0.3).unwrap();
        let n = meta.len() as f64;
        for a in 0..2 {
            let zeros = w.m[a].iter().filter(|&&b| !b).count() as f64 / n;
            assert!((zeros - 0.3).abs() < 0.02, "axis {a}: {zeros}");
        }
    }

    #[test]
    fn cg_recovers_band_limited_with_monotone_residual() {
        let meta = VolumeMeta::isotropic([12, 12, 12]);
        let k = build_dipole(meta).unwrap();
        let chi = band_limited(&k, 0.1, 2);
        let b = forward_field(&chi, &k).unwrap();
        let r = cg_least_squares(&b, &k, None, 200, 1e-12).unwrap();
        assert!(rel(&r.chi, &chi) < 1e-8, "{}", rel(&r.chi, &chi));
        for pair in r.residuals.windows(2) {
            assert!(pair[1] <= pair[0] * (1.0 + 1e-8));
        }
        let z = cg_least_squares(&RealVolume::zeros(meta), &k, None, 10, 1e-12).unwrap();
        assert!(z.chi.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn medi_without_regularization_matches_cg() {
        let meta = VolumeMeta::isotropic([12, 12, 12]);
        let k = build_dipole(meta).unwrap();
        let chi = band_limited(&k, 0.1, 5);
        let b = forward_field(&chi, &k).unwrap();
        let weights =
            build_medi_weights(&RealVolume::constant(meta, 1.0), &Mask::full(meta), 0.3).unwrap();
        let p = MediParams {
            lambda: 0.0,
            iters: 300,
            ..MediParams::default()
        };
        let m = medi_invert(&b, &k, &weights, p).unwrap();
        let cg = cg_least_squares(&b, &k, None, 200, 1e-12).unwrap();
        assert!(rel(&m.chi, &cg.chi) < 1e-4, "{}", rel(&m.chi, &cg.chi));
        for pair in m.trace.windows(2) {
            assert!(pair[1].objective <= pair[0].objective);
        }
    }

    #[test]
    fn medi_trace_is_monotone_with_regularization() {
        let meta = VolumeMeta::isotropic([12, 12, 12]);
        let k = build_dipole(meta).unwrap();
        let chi = RealVolume::from_fn(meta, |x, y, z| {
            if (3..8).contains(&x) && (4..9).contains(&y) && z > 5 {
                0.1
            } else {
                0.0
            }
        });
        let b = forward_field(&chi, &k).unwrap();
        let weights = build_medi_weights(&random(meta, 1), &Mask::full(meta), 0.3).unwrap();
        let p = MediParams {
            lambda: 1e-3,
            iters: 50,
            ..MediParams::default()
        };
        let m = medi_invert(&b, &k, &weights, p).unwrap();
        assert!(m.trace.len() > 5);
        for pair in m.trace.windows(2) {
            assert!(pair[1].objective <= pair[0].objective);
        }
        let again = medi_invert(&b, &k, &weights, p).unwrap();
        assert_eq!(again.chi, m.chi);
    }
}
