use crate::error::{QsmError, Result};
use crate::scalar::Real;

/// Dense tensor. Activations use shape `[channels, nx, ny, nz]` with each channel stored
/// x-fastest, matching [`crate::RealVolume`].
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(QsmError::Shape(format!(
                "zero-sized dimension in {shape:?}"
            )));
        }
        let len: usize = shape.iter().product();
        if len != data.len() {
            return Err(QsmError::Shape(format!(
                "shape {shape:?} needs {len} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let len = shape.iter().product();
        Self {
            shape,
            data: vec![T::zero(); len],
        }
    }

    pub fn scalar(v: T) -> Self {
        Self {
            shape: vec![1],
            data: vec![v],
        }
    }

    /// Single-channel activation from f64 voxel data.
    pub fn from_volume_data(dims: [usize; 3], data: &[f64]) -> Result<Self> {
        Self::new(
            vec![1, dims[0], dims[1], dims[2]],
            data.iter().map(|&v| T::of(v)).collect(),
        )
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn item(&self) -> T {
        self.data[0]
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.as_f64()).collect()
    }

    /// `(channels, [nx, ny, nz])` of a 4-D activation.
    pub fn activation_dims(&self) -> Result<(usize, [usize; 3])> {
        match self.shape[..] {
            [c, x, y, z] => Ok((c, [x, y, z])),
            _ => Err(QsmError::Shape(format!(
                "expected [channels, nx, ny, nz], got {:?}",
                self.shape
            ))),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}
