//! PatchGAN discriminator: a stack of 4x4x4 convolutions producing a map of patch scores.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::generator::LEAKY_SLOPE;
use super::params::{filled, truncated_normal, ParamSet, INIT_STD};
use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{QsmError, Result};
use crate::scalar::Real;

pub const KERNEL: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiscriminatorConfig {
    pub n_layers: usize,
    pub base_channels: usize,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self {
            n_layers: 3,
            base_channels: 16,
        }
    }
}

impl DiscriminatorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 || self.n_layers > 6 {
            return Err(QsmError::param(
                "n_layers",
                format!("must be in 1..=6, got {}", self.n_layers),
            ));
        }
        if self.base_channels == 0 {
            return Err(QsmError::param("base_channels", "must be positive"));
        }
        Ok(())
    }

    /// `(out_channels, stride)` of each body layer; the first has no normalization.
    fn layers(&self) -> Vec<(usize, usize)> {
        (0..self.n_layers)
            .map(|i| {
                let c = self.base_channels << i.min(3);
                let stride = if i + 1 < self.n_layers || self.n_layers == 1 {
                    2
                } else {
                    1
                };
                (c, stride)
            })
            .collect()
    }

    /// Spatial dims of the score map for a given input, `None` if the input is too small.
    pub fn output_dims(&self, dims: [usize; 3]) -> Option<[usize; 3]> {
        let mut d = dims;
        for (_, stride) in self.layers().into_iter().chain([(1, 1)]) {
            for n in d.iter_mut() {
                *n = super::conv::conv_out_len(*n, KERNEL, stride, 1)?;
                if *n == 0 {
                    return None;
                }
            }
        }
        Some(d)
    }
}

#[derive(Debug, Clone, Copy)]
struct Layer {
    w: usize,
    bias: Option<usize>,
    norm: Option<(usize, usize)>,
    stride: usize,
}

#[derive(Debug, Clone)]
pub struct Discriminator<T: Real> {
    config: DiscriminatorConfig,
    params: ParamSet<T>,
    layers: Vec<Layer>,
    head_w: usize,
    head_b: usize,
}

impl<T: Real> Discriminator<T> {
    pub fn new(config: DiscriminatorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let mut layers = Vec::new();
        let mut cin = 1;
        for (i, (c, stride)) in config.layers().into_iter().enumerate() {
            let w = params.push(
                format!("layer{i}.w"),
                truncated_normal(vec![c, cin, KERNEL, KERNEL, KERNEL], INIT_STD, &mut rng),
            );
            let (bias, norm) = if i == 0 {
                (
                    Some(params.push(format!("layer{i}.b"), filled(vec![c], 0.0))),
                    None,
                )
            } else {
                let g = params.push(format!("layer{i}.gamma"), filled(vec![c], 1.0));
                let b = params.push(format!("layer{i}.beta"), filled(vec![c], 0.0));
                (None, Some((g, b)))
            };
            layers.push(Layer {
                w,
                bias,
                norm,
                stride,
            });
            cin = c;
        }
        let head_w = params.push(
            "head.w",
            truncated_normal(vec![1, cin, KERNEL, KERNEL, KERNEL], INIT_STD, &mut rng),
        );
        let head_b = params.push("head.b", filled(vec![1], 0.0));
        Ok(Self {
            config,
            params,
            layers,
            head_w,
            head_b,
        })
    }

    pub fn from_params(config: DiscriminatorConfig, params: ParamSet<T>) -> Result<Self> {
        let mut d = Self::new(config, 0)?;
        d.params.load_from(&params)?;
        Ok(d)
    }

    pub fn config(&self) -> &DiscriminatorConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    pub fn cast<U: Real>(&self) -> Discriminator<U> {
        Discriminator {
            config: self.config,
            params: self.params.cast(),
            layers: self.layers.clone(),
            head_w: self.head_w,
            head_b: self.head_b,
        }
    }

    /// Records the network on `tape`; `x` is a masked susceptibility patch `[1, nx, ny, nz]`.
    pub fn forward(&self, tape: &mut Tape<T>, p: &[Var], x: Var) -> Result<Var> {
        if p.len() != self.params.len() {
            return Err(QsmError::Shape(format!(
                "discriminator bound with {} tensors, expected {}",
                p.len(),
                self.params.len()
            )));
        }
        let (c, dims) = tape.value(x).activation_dims()?;
        if c != 1 {
            return Err(QsmError::Shape(format!(
                "discriminator expects 1 channel, got {c}"
            )));
        }
        if self.config.output_dims(dims).is_none() {
            return Err(QsmError::Shape(format!(
                "input {dims:?} too small for a {}-layer discriminator",
                self.config.n_layers
            )));
        }
        let mut h = x;
        for l in &self.layers {
            h = tape.conv3d(h, p[l.w], l.bias.map(|b| p[b]), l.stride, 1)?;
            if let Some((g, b)) = l.norm {
                h = tape.instance_norm(h, p[g], p[b])?;
            }
            h = tape.leaky_relu(h, LEAKY_SLOPE)?;
        }
        tape.conv3d(h, p[self.head_w], Some(p[self.head_b]), 1, 1)
    }

    pub fn predict(&self, input: Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false);
        let x = tape.constant(input);
        let y = self.forward(&mut tape, &p, x)?;
        Ok(tape.value(y).clone())
    }
}
