//! Quantitative susceptibility mapping toolkit: dipole physics, classical inversions,
//! a small reverse-mode tensor engine with the U-Net generator and patchGAN
//! discriminator, an unpaired physics-informed cycleGAN trainer, and evaluation metrics.

// `!(x > 0.0)` is used on purpose throughout: it rejects NaN along with non-positive values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod classical;
pub mod config;
pub mod dipole;
pub mod error;
pub mod gradcheck;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod phantom;
mod scalar;
pub mod training;
pub mod volume;

pub use dipole::{build_dipole, forward_field, naive_inverse, DipoleKernel, DipoleOperator};
pub use error::{QsmError, Result};
pub use scalar::Real;
pub use volume::io::{read_volume, write_volume};
pub use volume::{div3, fft3, grad3, ifft3, ComplexVolume, Mask, RealVolume, VolumeMeta};
