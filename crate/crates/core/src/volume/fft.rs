//! Separable 3D FFT over x-fastest arrays.
//!
//! Forward transforms are unnormalized; the inverse applies `1/N`.

use std::sync::Arc;

use num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::scalar::Real;

pub struct Fft3<T: Real> {
    dims: [usize; 3],
    forward: [Arc<dyn Fft<T>>; 3],
    inverse: [Arc<dyn Fft<T>>; 3],
}

impl<T: Real> Fft3<T> {
    pub fn new(dims: [usize; 3]) -> Self {
        let mut planner = FftPlanner::new();
        let forward = dims.map(|n| planner.plan_fft_forward(n));
        let inverse = dims.map(|n| planner.plan_fft_inverse(n));
        Self {
            dims,
            forward,
            inverse,
        }
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn len(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn forward(&self, data: &mut [Complex<T>]) {
        self.run(data, &self.forward);
    }

    pub fn inverse(&self, data: &mut [Complex<T>]) {
        self.run(data, &self.inverse);
        let scale = T::one() / T::of(self.len() as f64);
        for v in data.iter_mut() {
            *v = *v * scale;
        }
    }

    fn run(&self, data: &mut [Complex<T>], plans: &[Arc<dyn Fft<T>>; 3]) {
        assert_eq!(
            data.len(),
            self.len(),
            "buffer length does not match FFT dims"
        );
        let [nx, ny, nz] = self.dims;
        let n = data.len();
        if nx > 1 {
            plans[0].process(data);
        }
        if ny == 1 && nz == 1 {
            return;
        }
        let mut lines = vec![Complex::default(); n];
        // y lines: (x, z) pairs, each of length ny
        if ny > 1 {
            for z in 0..nz {
                for x in 0..nx {
                    let line = &mut lines[(z * nx + x) * ny..(z * nx + x + 1) * ny];
                    for (y, v) in line.iter_mut().enumerate() {
                        *v = data[x + nx * (y + ny * z)];
                    }
                }
            }
            plans[1].process(&mut lines);
            for z in 0..nz {
                for x in 0..nx {
                    let line = &lines[(z * nx + x) * ny..(z * nx + x + 1) * ny];
                    for (y, v) in line.iter().enumerate() {
                        data[x + nx * (y + ny * z)] = *v;
                    }
                }
            }
        }
        if nz > 1 {
            let plane = nx * ny;
            for p in 0..plane {
                for z in 0..nz {
                    lines[p * nz + z] = data[p + plane * z];
                }
            }
            plans[2].process(&mut lines);
            for p in 0..plane {
                for z in 0..nz {
                    data[p + plane * z] = lines[p * nz + z];
                }
            }
        }
    }
}

/// Integer FFT frequency of bin `i` on an axis of length `n`, in cycles per `n` samples.
pub fn fft_index_freq(i: usize, n: usize) -> i64 {
    if i < n.div_ceil(2) {
        i as i64
    } else {
        i as i64 - n as i64
    }
}
