//! Named parameter containers that outlive a single tape.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::tape::{Gradients, Tape, Var};
use super::tensor::Tensor;
use crate::error::{QsmError, Result};
use crate::scalar::Real;

pub const INIT_STD: f64 = 0.02;

/// Ordered, named tensors. Order is part of the checkpoint contract.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Real> Default for ParamSet<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> ParamSet<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    /// Appends a tensor and returns its slot index.
    pub fn push(&mut self, name: impl Into<String>, t: Tensor<T>) -> usize {
        self.names.push(name.into());
        self.tensors.push(t);
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn name(&self, i: usize) -> &str {
        &self.names[i]
    }

    pub fn tensor(&self, i: usize) -> &Tensor<T> {
        &self.tensors[i]
    }

    pub fn tensor_mut(&mut self, i: usize) -> &mut Tensor<T> {
        &mut self.tensors[i]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Records every tensor on the tape, as variables when `trainable`, else as constants.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> Vec<Var> {
        self.tensors
            .iter()
            .map(|t| {
                if trainable {
                    tape.variable(t.clone())
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect()
    }

    /// Per-tensor gradients for vars returned by [`ParamSet::bind`].
    pub fn collect_grads(&self, grads: &Gradients<T>, vars: &[Var]) -> Vec<Vec<T>> {
        self.tensors
            .iter()
            .zip(vars)
            .map(|(t, &v)| grads.get_or_zeros(v, t.len()))
            .collect()
    }

    pub fn cast<U: Real>(&self) -> ParamSet<U> {
        ParamSet {
            names: self.names.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|t| {
                    Tensor::new(
                        t.shape().to_vec(),
                        t.data().iter().map(|v| U::of(v.as_f64())).collect(),
                    )
                    .expect("shape preserved")
                })
                .collect(),
        }
    }

    /// Replaces values with those of `other`, which must have identical names and shapes.
    pub fn load_from(&mut self, other: &ParamSet<T>) -> Result<()> {
        if self.names != other.names {
            return Err(QsmError::Shape("parameter names differ".into()));
        }
        for (name, (a, b)) in self
            .names
            .iter()
            .zip(self.tensors.iter().zip(&other.tensors))
        {
            if a.shape() != b.shape() {
                return Err(QsmError::Shape(format!(
                    "parameter {name}: shape {:?} vs {:?}",
                    a.shape(),
                    b.shape()
                )));
            }
        }
        self.tensors.clone_from(&other.tensors);
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }
}

/// Normal(0, std) restricted to two standard deviations by rejection.
pub fn truncated_normal<T: Real, R: Rng + ?Sized>(
    shape: Vec<usize>,
    std: f64,
    rng: &mut R,
) -> Tensor<T> {
    let normal = Normal::new(0.0, std).expect("std is positive");
    let len = shape.iter().product();
    let data = (0..len)
        .map(|_| loop {
            let v: f64 = normal.sample(rng);
            if v.abs() <= 2.0 * std {
                break T::of(v);
            }
        })
        .collect();
    Tensor::new(shape, data).expect("length matches shape")
}

pub fn filled<T: Real>(shape: Vec<usize>, value: f64) -> Tensor<T> {
    let len = shape.iter().product();
    Tensor::new(shape, vec![T::of(value); len]).expect("length matches shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn truncated_normal_stays_within_two_std() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t: Tensor<f64> = truncated_normal(vec![20_000], 0.02, &mut rng);
        assert!(t.data().iter().all(|v| v.abs() <= 0.04));
        let mean = t.data().iter().sum::<f64>() / t.len() as f64;
        let var = t.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / t.len() as f64;
        // Variance of N(0, s) truncated at +-2s is about 0.774 s^2.
        assert!(mean.abs() < 1e-3);
        assert!((var.sqrt() / 0.02 - 0.774f64.sqrt()).abs() < 0.02);
    }

    #[test]
    fn bind_and_collect() {
        let mut p = ParamSet::<f64>::new();
        p.push("a", filled(vec![2], 1.5));
        p.push("b", filled(vec![3], 0.0));
        let mut tape = Tape::new();
        let vars = p.bind(&mut tape, true);
        let s = tape.sum(vars[0]).unwrap();
        let g = tape.backward(s).unwrap();
        let grads = p.collect_grads(&g, &vars);
        assert_eq!(grads, vec![vec![1.0, 1.0], vec![0.0; 3]]);
    }

    #[test]
    fn load_from_checks_shapes() {
        let mut p = ParamSet::<f32>::new();
        p.push("w", filled(vec![2], 1.0));
        let mut q = ParamSet::<f32>::new();
        q.push("w", filled(vec![3], 1.0));
        assert!(p.load_from(&q).is_err());
        let r = p.cast::<f64>().cast::<f32>();
        assert_eq!(r, p);
    }
}
