//! Shared fixtures for the benchmarks.

use qsm_core::nn::Tensor;
use qsm_core::phantom::random_piecewise;
use qsm_core::{RealVolume, VolumeMeta};

pub fn phantom(n: usize) -> RealVolume {
    random_piecewise(VolumeMeta::isotropic([n; 3]), 8, [-0.1, 0.1], 0)
        .expect("valid grid")
        .chi
}

/// Deterministic activation `[channels, n, n, n]` with values in [-1, 1).
pub fn activation(channels: usize, n: usize) -> Tensor<f32> {
    let len = channels * n * n * n;
    let data = (0..len)
        .map(|i| ((i.wrapping_mul(2_654_435_761) % 2000) as f32) / 1000.0 - 1.0)
        .collect();
    Tensor::new(vec![channels, n, n, n], data).expect("shape matches")
}
