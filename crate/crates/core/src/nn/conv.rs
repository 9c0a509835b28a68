//! 3D cross-correlation kernels via im2col and GEMM.

use crate::scalar::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub in_dims: [usize; 3],
    pub out_dims: [usize; 3],
}

/// Output length along one axis, `None` when the kernel does not fit.
pub fn conv_out_len(n: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = n + 2 * pad;
    if padded < kernel || stride == 0 {
        None
    } else {
        Some((padded - kernel) / stride + 1)
    }
}

impl ConvGeometry {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        in_dims: [usize; 3],
    ) -> Option<Self> {
        let mut out_dims = [0; 3];
        for a in 0..3 {
            out_dims[a] = conv_out_len(in_dims[a], kernel, stride, pad)?;
        }
        Some(Self {
            in_channels,
            out_channels,
            kernel,
            stride,
            pad,
            in_dims,
            out_dims,
        })
    }

    pub fn in_len(&self) -> usize {
        self.in_dims.iter().product()
    }

    pub fn out_len(&self) -> usize {
        self.out_dims.iter().product()
    }

    /// Rows of the im2col matrix: `in_channels * kernel^3`.
    pub fn patch_len(&self) -> usize {
        self.in_channels * self.kernel.pow(3)
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad == 0
    }

    /// Output positions `o` whose input index `o*stride + k - pad` lies in `0..n`.
    fn valid(&self, axis: usize, k: usize) -> (usize, usize) {
        let n = self.in_dims[axis] as isize;
        let no = self.out_dims[axis];
        let s = self.stride as isize;
        let off = k as isize - self.pad as isize;
        let lo = if off >= 0 { 0 } else { ((-off) + s - 1) / s };
        let hi = if n - off <= 0 {
            0
        } else {
            ((n - off - 1) / s + 1).min(no as isize)
        };
        (lo as usize, (hi.max(lo)) as usize)
    }
}

fn im2col<T: Real>(x: &[T], g: &ConvGeometry) -> Vec<T> {
    let k = g.kernel;
    let [nx, ny, _] = g.in_dims;
    let [ox_n, oy_n, _] = g.out_dims;
    let no = g.out_len();
    let ni = g.in_len();
    let s = g.stride;
    let mut cols = vec![T::zero(); g.patch_len() * no];
    for ic in 0..g.in_channels {
        let xc = &x[ic * ni..(ic + 1) * ni];
        for kz in 0..k {
            let (zlo, zhi) = g.valid(2, kz);
            for ky in 0..k {
                let (ylo, yhi) = g.valid(1, ky);
                for kx in 0..k {
                    let (xlo, xhi) = g.valid(0, kx);
                    let row = ((ic * k + kz) * k + ky) * k + kx;
                    let dst = &mut cols[row * no..(row + 1) * no];
                    for oz in zlo..zhi {
                        let iz = oz * s + kz - g.pad;
                        for oy in ylo..yhi {
                            let iy = oy * s + ky - g.pad;
                            let orow = (oz * oy_n + oy) * ox_n;
                            let irow = (iz * ny + iy) * nx;
                            for ox in xlo..xhi {
                                dst[orow + ox] = xc[irow + ox * s + kx - g.pad];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im<T: Real>(cols: &[T], g: &ConvGeometry) -> Vec<T> {
    let k = g.kernel;
    let [nx, ny, _] = g.in_dims;
    let [ox_n, oy_n, _] = g.out_dims;
    let no = g.out_len();
    let ni = g.in_len();
    let s = g.stride;
    let mut x = vec![T::zero(); g.in_channels * ni];
    for ic in 0..g.in_channels {
        let xc = &mut x[ic * ni..(ic + 1) * ni];
        for kz in 0..k {
            let (zlo, zhi) = g.valid(2, kz);
            for ky in 0..k {
                let (ylo, yhi) = g.valid(1, ky);
                for kx in 0..k {
                    let (xlo, xhi) = g.valid(0, kx);
                    let row = ((ic * k + kz) * k + ky) * k + kx;
                    let src = &cols[row * no..(row + 1) * no];
                    for oz in zlo..zhi {
                        let iz = oz * s + kz - g.pad;
                        for oy in ylo..yhi {
                            let iy = oy * s + ky - g.pad;
                            let orow = (oz * oy_n + oy) * ox_n;
                            let irow = (iz * ny + iy) * nx;
                            for ox in xlo..xhi {
                                let i = irow + ox * s + kx - g.pad;
                                xc[i] = xc[i] + src[orow + ox];
                            }
                        }
                    }
                }
            }
        }
    }
    x
}

/// Row-major `c[m x n] = a[m x k] * b[k x n] (+ c if accumulate)`, with optional transposes
/// given as the stored layout of `a` / `b`.
#[allow(clippy::too_many_arguments)]
fn matmul<T: Real>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    a_transposed: bool,
    b: &[T],
    b_transposed: bool,
    c: &mut [T],
    accumulate: bool,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if a_transposed {
        (1, m as isize)
    } else {
        (k as isize, 1)
    };
    let (rsb, csb) = if b_transposed {
        (1, k as isize)
    } else {
        (n as isize, 1)
    };
    let beta = if accumulate { T::one() } else { T::zero() };
    // SAFETY: the asserts above bound every access described by these strides.
    unsafe {
        T::gemm(
            m,
            k,
            n,
            T::one(),
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Weights are `[out, in, k, k, k]` with the last index along x.
pub fn conv3d_forward<T: Real>(x: &[T], w: &[T], bias: Option<&[T]>, g: &ConvGeometry) -> Vec<T> {
    let no = g.out_len();
    let mut out = vec![T::zero(); g.out_channels * no];
    if g.is_pointwise() {
        matmul(
            g.out_channels,
            g.in_channels,
            no,
            w,
            false,
            x,
            false,
            &mut out,
            false,
        );
    } else {
        let cols = im2col(x, g);
        matmul(
            g.out_channels,
            g.patch_len(),
            no,
            w,
            false,
            &cols,
            false,
            &mut out,
            false,
        );
    }
    if let Some(b) = bias {
        for (oc, chunk) in out.chunks_mut(no).enumerate() {
            for v in chunk {
                *v = *v + b[oc];
            }
        }
    }
    out
}

pub fn conv3d_backward_input<T: Real>(grad_out: &[T], w: &[T], g: &ConvGeometry) -> Vec<T> {
    let no = g.out_len();
    if g.is_pointwise() {
        let mut gx = vec![T::zero(); g.in_channels * no];
        matmul(
            g.in_channels,
            g.out_channels,
            no,
            w,
            true,
            grad_out,
            false,
            &mut gx,
            false,
        );
        return gx;
    }
    let mut cols = vec![T::zero(); g.patch_len() * no];
    matmul(
        g.patch_len(),
        g.out_channels,
        no,
        w,
        true,
        grad_out,
        false,
        &mut cols,
        false,
    );
    col2im(&cols, g)
}

pub fn conv3d_backward_weight<T: Real>(grad_out: &[T], x: &[T], g: &ConvGeometry) -> Vec<T> {
    let no = g.out_len();
    let mut gw = vec![T::zero(); g.out_channels * g.patch_len()];
    if g.is_pointwise() {
        matmul(
            g.out_channels,
            no,
            g.in_channels,
            grad_out,
            false,
            x,
            true,
            &mut gw,
            false,
        );
    } else {
        let cols = im2col(x, g);
        matmul(
            g.out_channels,
            no,
            g.patch_len(),
            grad_out,
            false,
            &cols,
            true,
            &mut gw,
            false,
        );
    }
    gw
}

pub fn conv3d_backward_bias<T: Real>(grad_out: &[T], g: &ConvGeometry) -> Vec<T> {
    grad_out
        .chunks(g.out_len())
        .map(|c| c.iter().copied().sum())
        .collect()
}
