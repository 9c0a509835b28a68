//! Unit dipole kernel in k-space and the forward/naive-inverse operators built on it.
//!
//! `d(k) = 1/3 - (k·b0)^2 / |k|^2` with physical frequencies `k_i = n_i / (N_i * s_i)`
//! and `d(0) := 0`.

use num_complex::Complex64;

use crate::error::{QsmError, Result};
use crate::scalar::Real;
use crate::volume::{fft_index_freq, Fft3, RealVolume, VolumeMeta};

pub const DEFAULT_NAIVE_EPS: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct DipoleKernel {
    pub meta: VolumeMeta,
    pub spectrum: Vec<f64>,
}

pub fn build_dipole(meta: VolumeMeta) -> Result<DipoleKernel> {
    meta.validate()?;
    let [nx, ny, nz] = meta.dims;
    let axis_freqs = |n: usize, s: f64| -> Vec<f64> {
        (0..n)
            .map(|i| fft_index_freq(i, n) as f64 / (n as f64 * s))
            .collect()
    };
    let kx = axis_freqs(nx, meta.voxel_size[0]);
    let ky = axis_freqs(ny, meta.voxel_size[1]);
    let kz = axis_freqs(nz, meta.voxel_size[2]);
    let b0 = meta.b0_dir;
    let d = |k: [f64; 3]| {
        let k2 = k[0] * k[0] + k[1] * k[1] + k[2] * k[2];
        if k2 == 0.0 {
            return 0.0;
        }
        let proj = k[0] * b0[0] + k[1] * b0[1] + k[2] * b0[2];
        // rounding can push 1/3 - cos^2 just outside [-2/3, 1/3]
        let cos2 = (proj * proj / k2).min(1.0);
        (1.0 / 3.0 - cos2).max(-2.0 / 3.0)
    };
    let mirror = |v: &[f64], i: usize| v[(v.len() - i) % v.len()];
    let mut spectrum = Vec::with_capacity(meta.len());
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                // Averaging with the mirrored bin keeps d(k) = d(-k) on even-length Nyquist
                // planes, where fftfreq has no positive partner; elsewhere both terms agree.
                let here = d([kx[x], ky[y], kz[z]]);
                let there = d([mirror(&kx, x), mirror(&ky, y), mirror(&kz, z)]);
                spectrum.push(0.5 * (here + there));
            }
        }
    }
    Ok(DipoleKernel { meta, spectrum })
}

impl DipoleKernel {
    pub fn to_volume(&self) -> RealVolume {
        RealVolume {
            meta: self.meta,
            data: self.spectrum.clone(),
        }
    }

    /// Precision-specific operator for the tensor engine.
    pub fn operator<T: Real>(&self) -> DipoleOperator<T> {
        DipoleOperator {
            spectrum: self.spectrum.iter().map(|&d| T::of(d)).collect(),
            fft: Fft3::new(self.meta.dims),
        }
    }
}

/// Applies `b̂ -> m(k) b̂` to a real volume and returns the complex result of the inverse FFT.
pub(crate) fn spectral_apply(
    v: &RealVolume,
    multiplier: impl Fn(usize) -> f64,
) -> Result<Vec<Complex64>> {
    if let Some(i) = v.data.iter().position(|x| !x.is_finite()) {
        return Err(QsmError::NonFinite(format!(
            "operator input at element {i}"
        )));
    }
    let fft = Fft3::<f64>::new(v.meta.dims);
    let mut buf: Vec<Complex64> = v.data.iter().map(|&r| Complex64::new(r, 0.0)).collect();
    fft.forward(&mut buf);
    for (i, c) in buf.iter_mut().enumerate() {
        *c *= multiplier(i);
    }
    fft.inverse(&mut buf);
    Ok(buf)
}

/// Real part of a spectral result after checking the imaginary residue is roundoff.
pub(crate) fn real_checked(
    buf: Vec<Complex64>,
    meta: VolumeMeta,
    scale: f64,
) -> Result<RealVolume> {
    let mut re_max = 0.0f64;
    let mut im_max = 0.0f64;
    for c in &buf {
        re_max = re_max.max(c.re.abs());
        im_max = im_max.max(c.im.abs());
    }
    if !(re_max.is_finite() && im_max.is_finite()) {
        return Err(QsmError::NonFinite("spectral operator output".into()));
    }
    let reference = re_max.max(scale);
    if im_max > 1e-8 * reference {
        return Err(QsmError::NonFinite(format!(
            "imaginary residue {im_max:e} exceeds tolerance (real max {re_max:e})"
        )));
    }
    Ok(RealVolume {
        meta,
        data: buf.into_iter().map(|c| c.re).collect(),
    })
}

/// `b = F^-1 d F chi`.
pub fn forward_field(chi: &RealVolume, kernel: &DipoleKernel) -> Result<RealVolume> {
    chi.meta.ensure_same(&kernel.meta, "forward_field")?;
    let buf = spectral_apply(chi, |i| kernel.spectrum[i])?;
    real_checked(buf, chi.meta, chi.max_abs())
}

/// Element-wise k-space division, zeroing frequencies where `|d| <= eps`.
pub fn naive_inverse(b: &RealVolume, kernel: &DipoleKernel, eps: f64) -> Result<RealVolume> {
    if !(eps > 0.0) {
        return Err(QsmError::param("eps", format!("must be > 0, got {eps}")));
    }
    b.meta.ensure_same(&kernel.meta, "naive_inverse")?;
    let buf = spectral_apply(b, |i| {
        let d = kernel.spectrum[i];
        if d.abs() > eps {
            1.0 / d
        } else {
            0.0
        }
    })?;
    real_checked(buf, b.meta, b.max_abs() / eps)
}

/// `F^-1 d F` at a fixed grid, in the tensor engine's precision.
pub struct DipoleOperator<T: Real> {
    spectrum: Vec<T>,
    fft: Fft3<T>,
}

impl<T: Real> DipoleOperator<T> {
    pub fn dims(&self) -> [usize; 3] {
        self.fft.dims()
    }

    /// The operator is real-symmetric, so this is also its adjoint.
    pub fn apply(&self, x: &[T]) -> Vec<T> {
        let mut buf: Vec<num_complex::Complex<T>> = x
            .iter()
            .map(|&r| num_complex::Complex::new(r, T::zero()))
            .collect();
        self.fft.forward(&mut buf);
        for (c, &d) in buf.iter_mut().zip(&self.spectrum) {
            *c = *c * d;
        }
        self.fft.inverse(&mut buf);
        buf.into_iter().map(|c| c.re).collect()
    }
}
