//! 3D U-Net generator: phase and magnitude in, susceptibility out.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::params::{filled, truncated_normal, ParamSet, INIT_STD};
use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{QsmError, Result};
use crate::scalar::Real;

pub const LEAKY_SLOPE: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorConfig {
    /// Resolution levels; inputs must be divisible by `2^(depth-1)`.
    pub depth: usize,
    pub base_channels: usize,
    pub in_channels: usize,
    /// Initialize the final 1x1x1 layer to zero, so the untrained output is 0.
    pub zero_final: bool,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            depth: 3,
            base_channels: 16,
            in_channels: 2,
            zero_final: false,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.depth > 6 {
            return Err(QsmError::param(
                "depth",
                format!("must be in 1..=6, got {}", self.depth),
            ));
        }
        if self.base_channels == 0 {
            return Err(QsmError::param("base_channels", "must be positive"));
        }
        if self.in_channels == 0 {
            return Err(QsmError::param("in_channels", "must be positive"));
        }
        Ok(())
    }

    pub fn channels(&self, level: usize) -> usize {
        self.base_channels << level
    }

    /// Spatial dims must be multiples of this.
    pub fn divisor(&self) -> usize {
        1 << (self.depth - 1)
    }

    pub fn check_dims(&self, dims: [usize; 3]) -> Result<()> {
        let d = self.divisor();
        if dims.iter().all(|&n| n % d == 0) {
            return Ok(());
        }
        let padded = dims.map(|n| n.div_ceil(d) * d);
        Err(QsmError::Shape(format!(
            "generator of depth {} needs dims divisible by {d}; pad {dims:?} to {padded:?}",
            self.depth
        )))
    }
}

/// Conv (no bias) + instance norm + leaky ReLU.
#[derive(Debug, Clone, Copy)]
struct Block {
    w: usize,
    gamma: usize,
    beta: usize,
    stride: usize,
}

#[derive(Debug, Clone)]
pub struct Generator<T: Real> {
    config: GeneratorConfig,
    params: ParamSet<T>,
    encoder: Vec<Vec<Block>>,
    decoder: Vec<Vec<Block>>,
    final_w: usize,
    final_b: usize,
}

fn add_block<T: Real>(
    params: &mut ParamSet<T>,
    rng: &mut ChaCha8Rng,
    name: &str,
    cin: usize,
    cout: usize,
    stride: usize,
) -> Block {
    Block {
        w: params.push(
            format!("{name}.w"),
            truncated_normal(vec![cout, cin, 3, 3, 3], INIT_STD, rng),
        ),
        gamma: params.push(format!("{name}.gamma"), filled(vec![cout], 1.0)),
        beta: params.push(format!("{name}.beta"), filled(vec![cout], 0.0)),
        stride,
    }
}

impl<T: Real> Generator<T> {
    pub fn new(config: GeneratorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let mut encoder = Vec::new();
        for l in 0..config.depth {
            let c = config.channels(l);
            let mut blocks = Vec::new();
            let cin = if l == 0 {
                config.in_channels
            } else {
                let prev = config.channels(l - 1);
                blocks.push(add_block(
                    &mut params,
                    &mut rng,
                    &format!("enc{l}.down"),
                    prev,
                    c,
                    2,
                ));
                c
            };
            blocks.push(add_block(
                &mut params,
                &mut rng,
                &format!("enc{l}.conv0"),
                cin,
                c,
                1,
            ));
            blocks.push(add_block(
                &mut params,
                &mut rng,
                &format!("enc{l}.conv1"),
                c,
                c,
                1,
            ));
            encoder.push(blocks);
        }
        let mut decoder = Vec::new();
        for l in (0..config.depth.saturating_sub(1)).rev() {
            let c = config.channels(l);
            let cin = config.channels(l + 1) + c;
            decoder.push(vec![
                add_block(&mut params, &mut rng, &format!("dec{l}.conv0"), cin, c, 1),
                add_block(&mut params, &mut rng, &format!("dec{l}.conv1"), c, c, 1),
            ]);
        }
        let c0 = config.channels(0);
        let final_tensor = if config.zero_final {
            filled(vec![1, c0, 1, 1, 1], 0.0)
        } else {
            truncated_normal(vec![1, c0, 1, 1, 1], INIT_STD, &mut rng)
        };
        let final_w = params.push("final.w", final_tensor);
        let final_b = params.push("final.b", filled(vec![1], 0.0));
        Ok(Self {
            config,
            params,
            encoder,
            decoder,
            final_w,
            final_b,
        })
    }

    /// Rebuilds the architecture for `config` and installs `params`.
    pub fn from_params(config: GeneratorConfig, params: ParamSet<T>) -> Result<Self> {
        let mut g = Self::new(config, 0)?;
        g.params.load_from(&params)?;
        Ok(g)
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    pub fn cast<U: Real>(&self) -> Generator<U> {
        Generator {
            config: self.config,
            params: self.params.cast(),
            encoder: self.encoder.clone(),
            decoder: self.decoder.clone(),
            final_w: self.final_w,
            final_b: self.final_b,
        }
    }

    fn block(&self, tape: &mut Tape<T>, p: &[Var], b: Block, x: Var) -> Result<Var> {
        let y = tape.conv3d(x, p[b.w], None, b.stride, 1)?;
        let y = tape.instance_norm(y, p[b.gamma], p[b.beta])?;
        tape.leaky_relu(y, LEAKY_SLOPE)
    }

    /// Records the network on `tape`. `p` are this generator's bound parameters and `input`
    /// has shape `[in_channels, nx, ny, nz]`; the result is `[1, nx, ny, nz]`.
    pub fn forward(&self, tape: &mut Tape<T>, p: &[Var], input: Var) -> Result<Var> {
        if p.len() != self.params.len() {
            return Err(QsmError::Shape(format!(
                "generator bound with {} tensors, expected {}",
                p.len(),
                self.params.len()
            )));
        }
        let (c, dims) = tape.value(input).activation_dims()?;
        if c != self.config.in_channels {
            return Err(QsmError::Shape(format!(
                "generator expects {} input channels, got {c}",
                self.config.in_channels
            )));
        }
        self.config.check_dims(dims)?;
        let mut skips = Vec::with_capacity(self.config.depth);
        let mut x = input;
        for blocks in &self.encoder {
            for &b in blocks {
                x = self.block(tape, p, b, x)?;
            }
            skips.push(x);
        }
        skips.pop();
        for blocks in &self.decoder {
            let up = tape.upsample(x, 2)?;
            let skip = skips.pop().expect("one skip per decoder level");
            x = tape.concat(&[up, skip])?;
            for &b in blocks {
                x = self.block(tape, p, b, x)?;
            }
        }
        tape.conv3d(x, p[self.final_w], Some(p[self.final_b]), 1, 0)
    }

    /// Stateless evaluation on a fresh tape.
    pub fn predict(&self, input: Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false);
        let x = tape.constant(input);
        let y = self.forward(&mut tape, &p, x)?;
        Ok(tape.value(y).clone())
    }
}

/// Stacks single-channel volumes into one `[channels, nx, ny, nz]` tensor.
pub fn stack_channels<T: Real>(dims: [usize; 3], channels: &[&[f64]]) -> Result<Tensor<T>> {
    let n: usize = dims.iter().product();
    let mut data = Vec::with_capacity(n * channels.len());
    for ch in channels {
        if ch.len() != n {
            return Err(QsmError::Shape(format!(
                "channel of {} values, expected {n}",
                ch.len()
            )));
        }
        data.extend(ch.iter().map(|&v| T::of(v)));
    }
    Tensor::new(vec![channels.len(), dims[0], dims[1], dims[2]], data)
}
