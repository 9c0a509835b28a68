//! Adam with bias correction.

use serde::{Deserialize, Serialize};

use super::params::ParamSet;
use crate::error::{QsmError, Result};
use crate::scalar::Real;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-5,
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(QsmError::param(
                "lr",
                format!("must be positive, got {}", self.lr),
            ));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(QsmError::param(name, format!("must be in [0, 1), got {b}")));
            }
        }
        if !(self.eps > 0.0) {
            return Err(QsmError::param("eps", "must be positive"));
        }
        Ok(())
    }
}

/// First and second moment estimates, one buffer per parameter tensor.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    config: AdamConfig,
    step: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(config: AdamConfig, params: &ParamSet<T>) -> Result<Self> {
        config.validate()?;
        let buffers: Vec<Vec<T>> = params
            .iter()
            .map(|(_, t)| vec![T::zero(); t.len()])
            .collect();
        Ok(Self {
            config,
            step: 0,
            m: buffers.clone(),
            v: buffers,
        })
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update. `grads` must align with the parameter tensors.
    pub fn step(&mut self, params: &mut ParamSet<T>, grads: &[Vec<T>]) -> Result<()> {
        if grads.len() != params.len() {
            return Err(QsmError::Shape(format!(
                "{} gradient tensors for {} parameters",
                grads.len(),
                params.len()
            )));
        }
        for (i, g) in grads.iter().enumerate() {
            if g.len() != params.tensor(i).len() {
                return Err(QsmError::Shape(format!("gradient {i} has wrong length")));
            }
            if g.iter().any(|v| !v.is_finite()) {
                return Err(QsmError::NonFinite(format!(
                    "gradient of {}",
                    params.name(i)
                )));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (self.config.beta1, self.config.beta2);
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        let (lr, eps) = (self.config.lr, self.config.eps);
        let (b1t, b2t) = (T::of(b1), T::of(b2));
        for (i, g) in grads.iter().enumerate() {
            let p = params.tensor_mut(i).data_mut();
            for (j, &gj) in g.iter().enumerate() {
                let m = b1t * self.m[i][j] + (T::one() - b1t) * gj;
                let v = b2t * self.v[i][j] + (T::one() - b2t) * gj * gj;
                self.m[i][j] = m;
                self.v[i][j] = v;
                let mhat = m.as_f64() / c1;
                let vhat = v.as_f64() / c2;
                p[j] = p[j] - T::of(lr * mhat / (vhat.sqrt() + eps));
            }
        }
        Ok(())
    }
}
