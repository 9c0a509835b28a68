//! Central-difference checks of every differentiable op, both networks and every loss.
//!
//! Each case is a random scalar function of some input tensors. The analytic directional
//! derivative along a random direction is compared with a Richardson-extrapolated central
//! difference evaluated in double precision. The single-precision run differentiates the same
//! function on an `f32` tape; its reference is the double-precision difference at the same
//! (f32-representable) point, so the reported error is that of the f32 backward pass.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::dipole::build_dipole;
use crate::error::{QsmError, Result};
use crate::losses::{self, ChiPatch, FieldPatch, LossOptions, Norm};
use crate::nn::conv::ConvGeometry;
use crate::nn::{
    Discriminator, DiscriminatorConfig, Generator, GeneratorConfig, ParamSet, Tape, Tensor, Var,
};
use crate::scalar::Real;
use crate::volume::VolumeMeta;

pub const TOL_F64: f64 = 1e-6;
pub const TOL_F32: f64 = 1e-3;

/// Finite-difference step along a unit-norm direction. Small enough that networks with
/// thousands of leaky-ReLU units rarely see an activation cross its kink.
const STEP: f64 = 1e-6;

/// Limit on step halvings when the stencil straddles a kink (1e-6 / 2^12 is about 2.4e-10).
const MAX_STEP_HALVINGS: usize = 12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Probe {
    Conv3d,
    InstanceNorm,
    LeakyRelu,
    Upsample,
    Concat,
    Add,
    Sub,
    Mul,
    Scale,
    MulConst,
    Dipole,
    Grad3,
    Abs,
    Square,
    Sum,
    Mean,
    Phasor,
    Generator,
    Discriminator,
    CycleLoss,
    GradDiffLoss,
    TvLoss,
    GanGLoss,
    GanDLoss,
    DipLoss,
}

impl Probe {
    pub const ALL: [Probe; 25] = [
        Probe::Conv3d,
        Probe::InstanceNorm,
        Probe::LeakyRelu,
        Probe::Upsample,
        Probe::Concat,
        Probe::Add,
        Probe::Sub,
        Probe::Mul,
        Probe::Scale,
        Probe::MulConst,
        Probe::Dipole,
        Probe::Grad3,
        Probe::Abs,
        Probe::Square,
        Probe::Sum,
        Probe::Mean,
        Probe::Phasor,
        Probe::Generator,
        Probe::Discriminator,
        Probe::CycleLoss,
        Probe::GradDiffLoss,
        Probe::TvLoss,
        Probe::GanGLoss,
        Probe::GanDLoss,
        Probe::DipLoss,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Probe::Conv3d => "conv3d",
            Probe::InstanceNorm => "instance_norm",
            Probe::LeakyRelu => "leaky_relu",
            Probe::Upsample => "upsample",
            Probe::Concat => "concat",
            Probe::Add => "add",
            Probe::Sub => "sub",
            Probe::Mul => "mul",
            Probe::Scale => "scale",
            Probe::MulConst => "mul_const",
            Probe::Dipole => "dipole",
            Probe::Grad3 => "grad3",
            Probe::Abs => "abs",
            Probe::Square => "square",
            Probe::Sum => "sum",
            Probe::Mean => "mean",
            Probe::Phasor => "phasor_distance",
            Probe::Generator => "generator",
            Probe::Discriminator => "discriminator",
            Probe::CycleLoss => "cycle_loss",
            Probe::GradDiffLoss => "grad_diff_loss",
            Probe::TvLoss => "tv_loss",
            Probe::GanGLoss => "gan_g_loss",
            Probe::GanDLoss => "gan_d_loss",
            Probe::DipLoss => "dip_loss",
        }
    }

    pub fn is_loss(self) -> bool {
        matches!(
            self,
            Probe::CycleLoss
                | Probe::GradDiffLoss
                | Probe::TvLoss
                | Probe::GanGLoss
                | Probe::GanDLoss
                | Probe::DipLoss
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbeReport {
    pub probe: Probe,
    pub cases: usize,
    pub max_rel_f64: f64,
    pub max_rel_f32: f64,
}

impl ProbeReport {
    pub fn passed(&self) -> bool {
        self.max_rel_f64 < TOL_F64 && self.max_rel_f32 < TOL_F32
    }
}

/// Random inputs for one case. Values are rounded to f32 so both precisions see the same point.
struct Case {
    inputs: Vec<Tensor<f64>>,
    aux: Vec<Vec<f64>>,
    shape: Vec<usize>,
    meta: Option<VolumeMeta>,
    conv: Option<(usize, usize, bool)>,
    generator: Option<Generator<f64>>,
    discriminator: Option<Discriminator<f64>>,
    norm: Norm,
    mask_losses: bool,
}

fn round32(v: f64) -> f64 {
    v as f32 as f64
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| round32(rng.random_range(lo..hi))).collect()
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), uniform(rng, n, -1.0, 1.0)).expect("valid shape")
}

fn round_params(p: &ParamSet<f64>) -> Vec<Tensor<f64>> {
    p.iter()
        .map(|(_, t)| {
            Tensor::new(
                t.shape().to_vec(),
                t.data().iter().map(|&v| round32(v)).collect(),
            )
            .unwrap()
        })
        .collect()
}

/// Re-randomize a parameter set so norms and biases are away from their (degenerate) defaults.
fn perturbed(p: &ParamSet<f64>, rng: &mut ChaCha8Rng, scale: f64) -> Vec<Tensor<f64>> {
    round_params(p)
        .into_iter()
        .map(|t| {
            let data = t
                .data()
                .iter()
                .map(|&v| round32(v + scale * rng.random_range(-1.0..1.0)))
                .collect();
            Tensor::new(t.shape().to_vec(), data).unwrap()
        })
        .collect()
}

fn activation(rng: &mut ChaCha8Rng) -> Vec<usize> {
    vec![
        rng.random_range(1..=3),
        rng.random_range(2..=5),
        rng.random_range(2..=5),
        rng.random_range(2..=5),
    ]
}

fn random_meta(rng: &mut ChaCha8Rng, dims: [usize; 3]) -> VolumeMeta {
    let v: [f64; 3] = [0, 1, 2].map(|_| rng.sample::<f64, _>(StandardNormal));
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    let b0 = if rng.random_bool(0.5) {
        [0.0, 0.0, 1.0]
    } else {
        v.map(|c| c / n)
    };
    let vs = [0, 1, 2].map(|_| rng.random_range(0.5..2.0));
    VolumeMeta::new(dims, vs, b0).expect("valid meta")
}

fn binary_mask(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let mut m: Vec<f64> = (0..n)
        .map(|_| if rng.random_bool(0.7) { 1.0 } else { 0.0 })
        .collect();
    m[0] = 1.0;
    m
}

fn make_case(probe: Probe, rng: &mut ChaCha8Rng) -> Case {
    let mut case = Case {
        inputs: Vec::new(),
        aux: Vec::new(),
        shape: Vec::new(),
        meta: None,
        conv: None,
        generator: None,
        discriminator: None,
        norm: Norm::L1,
        mask_losses: false,
    };
    match probe {
        Probe::Conv3d => {
            let ci = rng.random_range(1..=3);
            let co = rng.random_range(1..=3);
            let k = [1, 3, 4][rng.random_range(0..3)];
            let stride = rng.random_range(1..=2);
            let pad = rng.random_range(0..=1);
            let dims = [0; 3].map(|_| rng.random_range(k.max(2)..=6));
            let bias = rng.random_bool(0.5);
            let g = ConvGeometry::new(ci, co, k, stride, pad, dims).expect("kernel fits");
            case.inputs
                .push(rand_tensor(rng, &[ci, dims[0], dims[1], dims[2]]));
            case.inputs.push(rand_tensor(rng, &[co, ci, k, k, k]));
            if bias {
                case.inputs.push(rand_tensor(rng, &[co]));
            }
            case.conv = Some((stride, pad, bias));
            let od = g.out_dims;
            case.shape = vec![co, od[0], od[1], od[2]];
        }
        Probe::InstanceNorm => {
            let s = activation(rng);
            case.inputs.push(rand_tensor(rng, &s));
            let c = s[0];
            case.inputs
                .push(Tensor::new(vec![c], uniform(rng, c, 0.5, 1.5)).unwrap());
            case.inputs.push(rand_tensor(rng, &[c]));
            case.shape = s;
        }
        Probe::LeakyRelu | Probe::Abs | Probe::Square | Probe::Sum | Probe::Mean | Probe::Grad3 => {
            let s = activation(rng);
            case.inputs.push(rand_tensor(rng, &s));
            case.shape = match probe {
                Probe::Sum | Probe::Mean => vec![1],
                Probe::Grad3 => vec![3 * s[0], s[1], s[2], s[3]],
                _ => s,
            };
        }
        Probe::Upsample => {
            let s = activation(rng);
            case.inputs.push(rand_tensor(rng, &s));
            case.shape = vec![s[0], 2 * s[1], 2 * s[2], 2 * s[3]];
        }
        Probe::Concat => {
            let a = activation(rng);
            let mut b = a.clone();
            b[0] = rng.random_range(1..=3);
            case.inputs.push(rand_tensor(rng, &a));
            case.inputs.push(rand_tensor(rng, &b));
            case.shape = vec![a[0] + b[0], a[1], a[2], a[3]];
        }
        Probe::Add | Probe::Sub | Probe::Mul => {
            let s = activation(rng);
            case.inputs.push(rand_tensor(rng, &s));
            case.inputs.push(rand_tensor(rng, &s));
            case.shape = s;
        }
        Probe::Scale => {
            let s = activation(rng);
            case.inputs.push(rand_tensor(rng, &s));
            case.aux.push(uniform(rng, 1, -2.0, 2.0));
            case.shape = s;
        }
        Probe::MulConst => {
            let s = activation(rng);
            let n = s.iter().product();
            case.inputs.push(rand_tensor(rng, &s));
            case.aux.push(uniform(rng, n, -2.0, 2.0));
            case.shape = s;
        }
        Probe::Dipole => {
            let s = activation(rng);
            case.inputs.push(rand_tensor(rng, &s));
            case.meta = Some(random_meta(rng, [s[1], s[2], s[3]]));
            case.shape = s;
        }
        Probe::Phasor => {
            let s = activation(rng);
            let n = s.iter().product();
            case.inputs
                .push(Tensor::new(s.clone(), uniform(rng, n, -3.0, 3.0)).unwrap());
            case.aux.push(uniform(rng, n, -3.0, 3.0));
            case.shape = s;
        }
        Probe::Generator => {
            let cfg = GeneratorConfig {
                depth: 2,
                base_channels: 3,
                ..GeneratorConfig::default()
            };
            let g = Generator::new(cfg, rng.random()).unwrap();
            case.inputs = perturbed(g.params(), rng, 0.3);
            case.aux.push(uniform(rng, 2 * 512, -1.0, 1.0));
            case.generator = Some(g);
            case.shape = vec![1, 8, 8, 8];
        }
        Probe::Discriminator => {
            let cfg = DiscriminatorConfig {
                n_layers: 3,
                base_channels: 2,
            };
            let d = Discriminator::new(cfg, rng.random()).unwrap();
            case.inputs = perturbed(d.params(), rng, 0.3);
            case.aux.push(uniform(rng, 4096, -1.0, 1.0));
            case.discriminator = Some(d);
            case.shape = vec![1, 2, 2, 2];
        }
        Probe::CycleLoss | Probe::GradDiffLoss | Probe::TvLoss => {
            let cfg = GeneratorConfig {
                depth: 2,
                base_channels: 2,
                ..GeneratorConfig::default()
            };
            let g = Generator::new(cfg, rng.random()).unwrap();
            case.inputs = perturbed(g.params(), rng, 0.3);
            case.generator = Some(g);
            let n = 64;
            // chi, chi mask, phase, magnitude, field mask
            case.aux.push(uniform(rng, n, -1.0, 1.0));
            case.aux.push(binary_mask(rng, n));
            case.aux.push(uniform(rng, n, -1.0, 1.0));
            case.aux.push(uniform(rng, n, 0.0, 1.0));
            case.aux.push(binary_mask(rng, n));
            case.meta = Some(random_meta(rng, [4, 4, 4]));
            case.norm = if rng.random_bool(0.5) {
                Norm::L1
            } else {
                Norm::L2
            };
            case.mask_losses = rng.random_bool(0.5);
        }
        Probe::GanGLoss => {
            let gcfg = GeneratorConfig {
                depth: 2,
                base_channels: 2,
                ..GeneratorConfig::default()
            };
            let dcfg = DiscriminatorConfig {
                n_layers: 2,
                base_channels: 2,
            };
            let g = Generator::new(gcfg, rng.random()).unwrap();
            let mut d = Discriminator::new(dcfg, rng.random()).unwrap();
            let dp = perturbed(d.params(), rng, 0.3);
            for (i, t) in dp.into_iter().enumerate() {
                *d.params_mut().tensor_mut(i) = t;
            }
            case.inputs = perturbed(g.params(), rng, 0.3);
            case.generator = Some(g);
            case.discriminator = Some(d);
            let n = 512;
            case.aux.push(uniform(rng, n, -1.0, 1.0));
            case.aux.push(uniform(rng, n, 0.0, 1.0));
            case.aux.push(binary_mask(rng, n));
        }
        Probe::GanDLoss => {
            let dcfg = DiscriminatorConfig {
                n_layers: 2,
                base_channels: 2,
            };
            let d = Discriminator::new(dcfg, rng.random()).unwrap();
            case.inputs = perturbed(d.params(), rng, 0.3);
            case.discriminator = Some(d);
            case.aux.push(uniform(rng, 512, -1.0, 1.0));
            case.aux.push(uniform(rng, 512, -1.0, 1.0));
        }
        Probe::DipLoss => {
            let n = 64;
            case.inputs
                .push(Tensor::new(vec![1, 4, 4, 4], uniform(rng, n, -1.0, 1.0)).unwrap());
            case.aux.push(uniform(rng, n, -2.0, 2.0));
            case.aux.push(uniform(rng, n, 0.0, 2.0));
            case.aux.push(vec![round32(rng.random_range(1e-3..0.1))]);
            case.meta = Some(random_meta(rng, [4, 4, 4]));
        }
    }
    if !probe.is_loss() {
        let n = case.shape.iter().product();
        case.aux.push(uniform(rng, n, -1.0, 1.0));
    }
    case
}

fn cast<T: Real>(v: &[f64]) -> Vec<T> {
    v.iter().map(|&x| T::of(x)).collect()
}

fn tensor<T: Real>(shape: Vec<usize>, v: &[f64]) -> Result<Tensor<T>> {
    Tensor::new(shape, cast(v))
}

/// Records the case's scalar function on `tape` with `x` bound to its inputs.
fn build<T: Real>(probe: Probe, case: &Case, tape: &mut Tape<T>, x: &[Var]) -> Result<Var> {
    let proj = |tape: &mut Tape<T>, y: Var| -> Result<Var> {
        let r = Arc::new(cast(case.aux.last().expect("projection weights")));
        let w = tape.mul_const(y, r)?;
        tape.sum(w)
    };
    let y = match probe {
        Probe::Conv3d => {
            let (stride, pad, bias) = case.conv.expect("conv case");
            let y = tape.conv3d(x[0], x[1], bias.then(|| x[2]), stride, pad)?;
            return proj(tape, y);
        }
        Probe::InstanceNorm => tape.instance_norm(x[0], x[1], x[2])?,
        Probe::LeakyRelu => tape.leaky_relu(x[0], 0.2)?,
        Probe::Upsample => tape.upsample(x[0], 2)?,
        Probe::Concat => tape.concat(&[x[0], x[1]])?,
        Probe::Add => tape.add(x[0], x[1])?,
        Probe::Sub => tape.sub(x[0], x[1])?,
        Probe::Mul => tape.mul(x[0], x[1])?,
        Probe::Scale => tape.scale(x[0], case.aux[0][0])?,
        Probe::MulConst => tape.mul_const(x[0], Arc::new(cast(&case.aux[0])))?,
        Probe::Dipole => {
            let op = Arc::new(build_dipole(case.meta.expect("meta"))?.operator());
            tape.dipole(x[0], &op)?
        }
        Probe::Grad3 => tape.grad3(x[0])?,
        Probe::Abs => tape.abs(x[0])?,
        Probe::Square => tape.square(x[0])?,
        Probe::Sum => tape.sum(x[0])?,
        Probe::Mean => tape.mean(x[0])?,
        Probe::Phasor => tape.phasor_distance(x[0], Arc::new(cast(&case.aux[0])))?,
        Probe::Generator => {
            let g = case.generator.as_ref().expect("generator").cast::<T>();
            let input = tape.constant(tensor(vec![2, 8, 8, 8], &case.aux[0])?);
            g.forward(tape, x, input)?
        }
        Probe::Discriminator => {
            let d = case
                .discriminator
                .as_ref()
                .expect("discriminator")
                .cast::<T>();
            let input = tape.constant(tensor(vec![1, 16, 16, 16], &case.aux[0])?);
            d.forward(tape, x, input)?
        }
        Probe::CycleLoss | Probe::GradDiffLoss | Probe::TvLoss => {
            let g = case.generator.as_ref().expect("generator").cast::<T>();
            let run = |tape: &mut Tape<T>, input: Var| g.forward(tape, x, input);
            let op = Arc::new(build_dipole(case.meta.expect("meta"))?.operator());
            let shape = vec![1, 4, 4, 4];
            let chis = [ChiPatch {
                chi: tensor(shape.clone(), &case.aux[0])?,
                mask: Arc::new(cast(&case.aux[1])),
            }];
            let fields = [FieldPatch {
                phase: tensor(shape.clone(), &case.aux[2])?,
                magnitude: tensor(shape, &case.aux[3])?,
                mask: Arc::new(cast(&case.aux[4])),
            }];
            let opts = LossOptions {
                norm: case.norm,
                mask_losses: case.mask_losses,
            };
            let graph = losses::cycle_graph(tape, &run, &op, &chis, &fields, opts)?;
            return Ok(match probe {
                Probe::CycleLoss => graph.cycle,
                Probe::GradDiffLoss => graph.grad,
                _ => graph.tv,
            });
        }
        Probe::GanGLoss => {
            let g = case.generator.as_ref().expect("generator").cast::<T>();
            let d = case
                .discriminator
                .as_ref()
                .expect("discriminator")
                .cast::<T>();
            let dp = d.params().bind(tape, false);
            let disc = |tape: &mut Tape<T>, v: Var| d.forward(tape, &dp, v);
            let shape = vec![1, 8, 8, 8];
            let field = FieldPatch {
                phase: tensor(shape.clone(), &case.aux[0])?,
                magnitude: tensor(shape, &case.aux[1])?,
                mask: Arc::new(cast(&case.aux[2])),
            };
            let input = tape.constant(field.input()?);
            let fake = g.forward(tape, x, input)?;
            return losses::gan_g_graph(tape, &disc, &[fake], &[Arc::clone(&field.mask)]);
        }
        Probe::GanDLoss => {
            let d = case
                .discriminator
                .as_ref()
                .expect("discriminator")
                .cast::<T>();
            let disc = |tape: &mut Tape<T>, v: Var| d.forward(tape, x, v);
            let shape = vec![1, 8, 8, 8];
            let real = [tensor(shape.clone(), &case.aux[0])?];
            let fake = [tensor(shape, &case.aux[1])?];
            return losses::gan_d_graph(tape, &disc, &real, &fake);
        }
        Probe::DipLoss => {
            let op = Arc::new(build_dipole(case.meta.expect("meta"))?.operator());
            let g = losses::dip_graph(
                tape,
                x[0],
                &Arc::new(cast(&case.aux[0])),
                &Arc::new(cast(&case.aux[1])),
                &op,
                case.aux[2][0],
            )?;
            return Ok(g.total);
        }
    };
    proj(tape, y)
}

fn evaluate<T: Real>(
    probe: Probe,
    case: &Case,
    inputs: &[Tensor<T>],
    with_grad: bool,
) -> Result<(f64, Vec<Vec<T>>)> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.variable(t.clone())).collect();
    let out = build(probe, case, &mut tape, &vars)?;
    let value = tape.value(out).item().as_f64();
    if !with_grad {
        return Ok((value, Vec::new()));
    }
    let grads = tape.backward(out)?;
    let g = inputs
        .iter()
        .zip(&vars)
        .map(|(t, &v)| grads.get_or_zeros(v, t.len()))
        .collect();
    Ok((value, g))
}

/// Function value and the kink pattern of the recorded graph.
fn evaluate_piece(probe: Probe, case: &Case, inputs: &[Tensor<f64>]) -> Result<(f64, Vec<bool>)> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.variable(t.clone())).collect();
    let out = build(probe, case, &mut tape, &vars)?;
    Ok((tape.value(out).item().as_f64(), tape.kink_pattern()))
}

fn shifted(inputs: &[Tensor<f64>], dir: &[Vec<f64>], h: f64) -> Vec<Tensor<f64>> {
    inputs
        .iter()
        .zip(dir)
        .map(|(t, d)| {
            let data = t.data().iter().zip(d).map(|(&x, &v)| x + h * v).collect();
            Tensor::new(t.shape().to_vec(), data).unwrap()
        })
        .collect()
}

/// Richardson-extrapolated central difference of the case function along `dir`.
///
/// A difference quotient only approximates the derivative when the stencil stays on one smooth
/// piece. Networks with many leaky-ReLU units occasionally put a kink within `h` of the point,
/// so the step is halved until every stencil point shares the kink pattern of the centre.
fn numeric_directional(probe: Probe, case: &Case, dir: &[Vec<f64>], h: f64) -> Result<f64> {
    let (_, centre) = evaluate_piece(probe, case, &case.inputs)?;
    let mut h = h;
    for _ in 0..MAX_STEP_HALVINGS {
        let mut f = [0.0; 4];
        let mut smooth = true;
        for (slot, t) in f.iter_mut().zip([h, -h, h / 2.0, -h / 2.0]) {
            let (v, pattern) = evaluate_piece(probe, case, &shifted(&case.inputs, dir, t))?;
            *slot = v;
            smooth &= pattern == centre;
        }
        if smooth {
            let d1 = (f[0] - f[1]) / (2.0 * h);
            let d2 = (f[2] - f[3]) / h;
            return Ok((4.0 * d2 - d1) / 3.0);
        }
        h /= 2.0;
    }
    Err(QsmError::Diverged(format!(
        "{}: no smooth finite-difference stencil down to step {h:e}",
        probe.name()
    )))
}

fn dot<T: Real>(g: &[Vec<T>], dir: &[Vec<f64>]) -> f64 {
    g.iter()
        .zip(dir)
        .map(|(a, b)| a.iter().zip(b).map(|(&x, &y)| x.as_f64() * y).sum::<f64>())
        .sum()
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-12)
}

/// Relative errors `(f64, f32)` for one random case.
fn check_case(probe: Probe, rng: &mut ChaCha8Rng) -> Result<(f64, f64)> {
    let case = make_case(probe, rng);
    let (_, g64) = evaluate(probe, &case, &case.inputs, true)?;
    let random: Vec<Vec<f64>> = case
        .inputs
        .iter()
        .map(|t| {
            (0..t.len())
                .map(|_| rng.sample::<f64, _>(StandardNormal))
                .collect()
        })
        .collect();
    let dir = check_direction(&g64, &random);
    let numeric = numeric_directional(probe, &case, &dir, STEP)?;
    let inputs32: Vec<Tensor<f32>> = case
        .inputs
        .iter()
        .map(|t| Tensor::new(t.shape().to_vec(), cast(t.data())).unwrap())
        .collect();
    let (_, g32) = evaluate(probe, &case, &inputs32, true)?;
    Ok((
        rel_err(dot(&g64, &dir), numeric),
        rel_err(dot(&g32, &dir), numeric),
    ))
}

fn unit(v: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = v.iter().flatten().map(|x| x * x).sum::<f64>().sqrt();
    let n = if n > 0.0 { n } else { 1.0 };
    v.iter()
        .map(|c| c.iter().map(|x| x / n).collect())
        .collect()
}

/// Unit direction halfway between the analytic gradient and a random direction. The gradient
/// part keeps the directional derivative large relative to roundoff; the random part probes
/// components the analytic gradient may have missed.
fn check_direction(grad: &[Vec<f64>], random: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let g = unit(grad);
    let r = unit(random);
    let sum: Vec<Vec<f64>> = g
        .iter()
        .zip(&r)
        .map(|(a, b)| a.iter().zip(b).map(|(x, y)| x + y).collect())
        .collect();
    unit(&sum)
}

/// Runs `cases` random cases of one probe.
pub fn run_probe(probe: Probe, cases: usize, seed: u64) -> Result<ProbeReport> {
    let mut rng =
        ChaCha8Rng::seed_from_u64(seed ^ (probe as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let mut report = ProbeReport {
        probe,
        cases,
        max_rel_f64: 0.0,
        max_rel_f32: 0.0,
    };
    for _ in 0..cases {
        let (e64, e32) = check_case(probe, &mut rng)?;
        report.max_rel_f64 = report.max_rel_f64.max(e64);
        report.max_rel_f32 = report.max_rel_f32.max(e32);
    }
    Ok(report)
}

pub fn run_all(cases: usize, seed: u64) -> Result<Vec<ProbeReport>> {
    Probe::ALL
        .iter()
        .map(|&p| run_probe(p, cases, seed))
        .collect()
}
