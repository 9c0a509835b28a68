//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! Nodes are appended in evaluation order, so the tape is always topologically sorted and
//! `backward` visits each node once, from the loss down to the leaves.

use std::sync::Arc;

use super::conv::{self, ConvGeometry};
use super::tensor::Tensor;
use crate::dipole::DipoleOperator;
use crate::error::{QsmError, Result};
use crate::scalar::Real;
use crate::volume::{div3_slice, grad3_slice};

pub const INSTANCE_NORM_EPS: f64 = 1e-5;
pub const PHASOR_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T: Real> {
    Leaf,
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeometry,
    },
    InstanceNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    LeakyRelu {
        x: Var,
        slope: T,
    },
    Upsample {
        x: Var,
        factor: usize,
    },
    Concat {
        parts: Vec<Var>,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    MulConst(Var, Arc<Vec<T>>),
    Dipole(Var, Arc<DipoleOperator<T>>),
    Grad3(Var),
    Abs(Var),
    Square(Var),
    Sum(Var),
    Mean(Var),
    Phasor {
        x: Var,
        target: Arc<Vec<T>>,
    },
}

struct Node<T: Real> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

pub struct Tape<T: Real> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn same_shape<T: Real>(a: &Tensor<T>, b: &Tensor<T>, what: &str) -> Result<()> {
    if a.shape() == b.shape() {
        Ok(())
    } else {
        Err(QsmError::Shape(format!(
            "{what}: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )))
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Leaf that receives no gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf whose gradient is collected by [`Tape::backward`].
    pub fn variable(&mut self, t: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, parents: &[Var], name: &str) -> Result<Var> {
        if !value.is_finite() {
            return Err(QsmError::NonFinite(format!("output of {name}")));
        }
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn conv3d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let (ci, dims) = self.value(x).activation_dims()?;
        let ws = self.value(w).shape().to_vec();
        let (co, k) = match ws[..] {
            [co, wci, k, k2, k3] if wci == ci && k == k2 && k == k3 => (co, k),
            _ => {
                return Err(QsmError::Shape(format!(
                    "conv3d weight {ws:?} incompatible with {ci} input channels"
                )))
            }
        };
        if let Some(b) = b {
            if self.value(b).shape() != [co] {
                return Err(QsmError::Shape(format!(
                    "conv3d bias {:?} expected [{co}]",
                    self.value(b).shape()
                )));
            }
        }
        let geom = ConvGeometry::new(ci, co, k, stride, pad, dims).ok_or_else(|| {
            QsmError::Shape(format!(
                "kernel {k} stride {stride} pad {pad} does not fit input {dims:?}"
            ))
        })?;
        let out = conv::conv3d_forward(
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            &geom,
        );
        let [ox, oy, oz] = geom.out_dims;
        let value = Tensor::new(vec![co, ox, oy, oz], out)?;
        let mut parents = vec![x, w];
        parents.extend(b);
        self.push(value, Op::Conv { x, w, b, geom }, &parents, "conv3d")
    }

    /// Per-channel normalization to zero mean / unit variance followed by `gamma * xhat + beta`.
    pub fn instance_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (c, dims) = self.value(x).activation_dims()?;
        if self.value(gamma).shape() != [c] || self.value(beta).shape() != [c] {
            return Err(QsmError::Shape(format!(
                "instance_norm affine params must be [{c}]"
            )));
        }
        let n: usize = dims.iter().product();
        let nf = T::of(n as f64);
        let eps = T::of(INSTANCE_NORM_EPS);
        let xv = self.value(x).data();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut xhat = vec![T::zero(); c * n];
        let mut inv_std = vec![T::zero(); c];
        let mut out = vec![T::zero(); c * n];
        for ch in 0..c {
            let xs = &xv[ch * n..(ch + 1) * n];
            let mean = xs.iter().copied().sum::<T>() / nf;
            let var = xs.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nf;
            let is = T::one() / (var + eps).sqrt();
            inv_std[ch] = is;
            for i in 0..n {
                let h = (xs[i] - mean) * is;
                xhat[ch * n + i] = h;
                out[ch * n + i] = g[ch] * h + bt[ch];
            }
        }
        let value = Tensor::new(self.value(x).shape().to_vec(), out)?;
        self.push(
            value,
            Op::InstanceNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            &[x, gamma, beta],
            "instance_norm",
        )
    }

    /// Sign of every input to a non-differentiable point (leaky ReLU, abs), in recording order.
    /// Two evaluations of the same graph are on one smooth piece when these agree.
    pub(crate) fn kink_pattern(&self) -> Vec<bool> {
        let mut out = Vec::new();
        for node in &self.nodes {
            if let Op::LeakyRelu { x, .. } | Op::Abs(x) = &node.op {
                out.extend(self.value(*x).data().iter().map(|&v| v > T::zero()));
            }
        }
        out
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Result<Var> {
        let s = T::of(slope);
        let xv = self.value(x);
        let data = xv
            .data()
            .iter()
            .map(|&v| if v > T::zero() { v } else { v * s })
            .collect();
        let value = Tensor::new(xv.shape().to_vec(), data)?;
        self.push(value, Op::LeakyRelu { x, slope: s }, &[x], "leaky_relu")
    }

    /// Nearest-neighbour upsampling: every voxel is replicated `factor^3` times.
    pub fn upsample(&mut self, x: Var, factor: usize) -> Result<Var> {
        if factor == 0 {
            return Err(QsmError::Shape("upsample factor must be >= 1".into()));
        }
        let (c, [nx, ny, nz]) = self.value(x).activation_dims()?;
        let (mx, my, mz) = (nx * factor, ny * factor, nz * factor);
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(c * mx * my * mz);
        for ch in 0..c {
            let base = ch * nx * ny * nz;
            for z in 0..mz {
                for y in 0..my {
                    let row = base + ((z / factor) * ny + y / factor) * nx;
                    for xo in 0..mx {
                        out.push(xv[row + xo / factor]);
                    }
                }
            }
        }
        let value = Tensor::new(vec![c, mx, my, mz], out)?;
        self.push(value, Op::Upsample { x, factor }, &[x], "upsample")
    }

    /// Channel concatenation of activations with equal spatial dims.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let (_, dims) = self
            .value(
                *parts
                    .first()
                    .ok_or_else(|| QsmError::Shape("concat of nothing".into()))?,
            )
            .activation_dims()?;
        let mut channels = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (c, d) = self.value(p).activation_dims()?;
            if d != dims {
                return Err(QsmError::Shape(format!(
                    "concat spatial dims {d:?} vs {dims:?}"
                )));
            }
            channels += c;
            data.extend_from_slice(self.value(p).data());
        }
        let value = Tensor::new(vec![channels, dims[0], dims[1], dims[2]], data)?;
        self.push(
            value,
            Op::Concat {
                parts: parts.to_vec(),
            },
            parts,
            "concat",
        )
    }

    fn zip_with(&self, a: Var, b: Var, what: &str, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        same_shape(self.value(a), self.value(b), what)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(self.value(a).shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip_with(a, b, "add", |x, y| x + y)?;
        self.push(v, Op::Add(a, b), &[a, b], "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip_with(a, b, "sub", |x, y| x - y)?;
        self.push(v, Op::Sub(a, b), &[a, b], "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip_with(a, b, "mul", |x, y| x * y)?;
        self.push(v, Op::Mul(a, b), &[a, b], "mul")
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let c = T::of(c);
        let xv = self.value(x);
        let value = Tensor::new(
            xv.shape().to_vec(),
            xv.data().iter().map(|&v| v * c).collect(),
        )?;
        self.push(value, Op::Scale(x, c), &[x], "scale")
    }

    /// Element-wise product with a constant (masks, weights).
    pub fn mul_const(&mut self, x: Var, c: Arc<Vec<T>>) -> Result<Var> {
        let xv = self.value(x);
        if xv.len() != c.len() {
            return Err(QsmError::Shape(format!(
                "mul_const length {} vs {}",
                c.len(),
                xv.len()
            )));
        }
        let data = xv
            .data()
            .iter()
            .zip(c.iter())
            .map(|(&a, &b)| a * b)
            .collect();
        let value = Tensor::new(xv.shape().to_vec(), data)?;
        self.push(value, Op::MulConst(x, c), &[x], "mul_const")
    }

    /// `F^-1 d F` applied to every channel.
    pub fn dipole(&mut self, x: Var, op: &Arc<DipoleOperator<T>>) -> Result<Var> {
        let (c, dims) = self.value(x).activation_dims()?;
        if dims != op.dims() {
            return Err(QsmError::Shape(format!(
                "dipole operator built for {:?}, input is {dims:?}",
                op.dims()
            )));
        }
        let n: usize = dims.iter().product();
        let mut out = Vec::with_capacity(c * n);
        for chunk in self.value(x).data().chunks(n) {
            out.extend(op.apply(chunk));
        }
        let value = Tensor::new(self.value(x).shape().to_vec(), out)?;
        self.push(value, Op::Dipole(x, Arc::clone(op)), &[x], "dipole")
    }

    /// Forward differences (replicate boundary); channel `c` maps to output channels `3c..3c+3`.
    pub fn grad3(&mut self, x: Var) -> Result<Var> {
        let (c, dims) = self.value(x).activation_dims()?;
        let n: usize = dims.iter().product();
        let mut out = vec![T::zero(); 3 * c * n];
        for (ch, src) in self.value(x).data().chunks(n).enumerate() {
            let (gx, rest) = out[3 * ch * n..3 * (ch + 1) * n].split_at_mut(n);
            let (gy, gz) = rest.split_at_mut(n);
            grad3_slice(src, dims, gx, gy, gz);
        }
        let value = Tensor::new(vec![3 * c, dims[0], dims[1], dims[2]], out)?;
        self.push(value, Op::Grad3(x), &[x], "grad3")
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let value = Tensor::new(
            xv.shape().to_vec(),
            xv.data().iter().map(|v| v.abs()).collect(),
        )?;
        self.push(value, Op::Abs(x), &[x], "abs")
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let value = Tensor::new(
            xv.shape().to_vec(),
            xv.data().iter().map(|&v| v * v).collect(),
        )?;
        self.push(value, Op::Square(x), &[x], "square")
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().copied().sum::<T>();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x], "sum")
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let s = xv.data().iter().copied().sum::<T>() / T::of(xv.len() as f64);
        self.push(Tensor::scalar(s), Op::Mean(x), &[x], "mean")
    }

    /// `|e^{jx} - e^{jt}|`, evaluated as `sqrt(4 sin^2((x - t)/2) + eps) - sqrt(eps)` so it is
    /// smooth everywhere and exactly zero at `x = t`.
    pub fn phasor_distance(&mut self, x: Var, target: Arc<Vec<T>>) -> Result<Var> {
        let xv = self.value(x);
        if xv.len() != target.len() {
            return Err(QsmError::Shape(format!(
                "phasor target length {} vs {}",
                target.len(),
                xv.len()
            )));
        }
        let eps = T::of(PHASOR_EPS);
        let two = T::of(2.0);
        let data = xv
            .data()
            .iter()
            .zip(target.iter())
            .map(|(&a, &b)| {
                let s = ((a - b) / two).sin();
                (T::of(4.0) * s * s + eps).sqrt() - eps.sqrt()
            })
            .collect();
        let value = Tensor::new(xv.shape().to_vec(), data)?;
        self.push(value, Op::Phasor { x, target }, &[x], "phasor_distance")
    }

    /// Gradients of the scalar `loss` with respect to every node that requires them.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(QsmError::Shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let acc = |grads: &mut [Option<Vec<T>>], v: Var, contrib: Vec<T>| match &mut grads[v.0] {
            Some(existing) => {
                for (e, c) in existing.iter_mut().zip(contrib) {
                    *e = *e + c;
                }
            }
            slot @ None => *slot = Some(contrib),
        };
        match &node.op {
            Op::Leaf => {}
            Op::Conv { x, w, b, geom } => {
                if self.wants(*x) {
                    acc(
                        grads,
                        *x,
                        conv::conv3d_backward_input(g, self.value(*w).data(), geom),
                    );
                }
                if self.wants(*w) {
                    acc(
                        grads,
                        *w,
                        conv::conv3d_backward_weight(g, self.value(*x).data(), geom),
                    );
                }
                if let Some(b) = b {
                    if self.wants(*b) {
                        acc(grads, *b, conv::conv3d_backward_bias(g, geom));
                    }
                }
            }
            Op::InstanceNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let c = inv_std.len();
                let n = xhat.len() / c;
                let nf = T::of(n as f64);
                let gm = self.value(*gamma).data();
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                let mut dx = vec![T::zero(); c * n];
                for ch in 0..c {
                    let gs = &g[ch * n..(ch + 1) * n];
                    let hs = &xhat[ch * n..(ch + 1) * n];
                    let sum_g: T = gs.iter().copied().sum();
                    let sum_gh: T = gs.iter().zip(hs).map(|(&a, &b)| a * b).sum();
                    dbeta[ch] = sum_g;
                    dgamma[ch] = sum_gh;
                    let k = gm[ch] * inv_std[ch] / nf;
                    for i in 0..n {
                        dx[ch * n + i] = k * (nf * gs[i] - sum_g - hs[i] * sum_gh);
                    }
                }
                if self.wants(*x) {
                    acc(grads, *x, dx);
                }
                if self.wants(*gamma) {
                    acc(grads, *gamma, dgamma);
                }
                if self.wants(*beta) {
                    acc(grads, *beta, dbeta);
                }
            }
            Op::LeakyRelu { x, slope } => {
                let xv = self.value(*x).data();
                let d = g
                    .iter()
                    .zip(xv)
                    .map(|(&gi, &xi)| if xi > T::zero() { gi } else { gi * *slope })
                    .collect();
                acc(grads, *x, d);
            }
            Op::Upsample { x, factor } => {
                let (c, [nx, ny, nz]) = self
                    .value(*x)
                    .activation_dims()
                    .expect("checked on forward");
                let f = *factor;
                let (mx, my, mz) = (nx * f, ny * f, nz * f);
                let mut d = vec![T::zero(); c * nx * ny * nz];
                for ch in 0..c {
                    let base = ch * nx * ny * nz;
                    let obase = ch * mx * my * mz;
                    for z in 0..mz {
                        for y in 0..my {
                            let row = base + ((z / f) * ny + y / f) * nx;
                            let orow = obase + (z * my + y) * mx;
                            for xo in 0..mx {
                                d[row + xo / f] = d[row + xo / f] + g[orow + xo];
                            }
                        }
                    }
                }
                acc(grads, *x, d);
            }
            Op::Concat { parts } => {
                let mut offset = 0;
                for p in parts {
                    let n = self.value(*p).len();
                    if self.wants(*p) {
                        acc(grads, *p, g[offset..offset + n].to_vec());
                    }
                    offset += n;
                }
            }
            Op::Add(a, b) => {
                if self.wants(*a) {
                    acc(grads, *a, g.to_vec());
                }
                if self.wants(*b) {
                    acc(grads, *b, g.to_vec());
                }
            }
            Op::Sub(a, b) => {
                if self.wants(*a) {
                    acc(grads, *a, g.to_vec());
                }
                if self.wants(*b) {
                    acc(grads, *b, g.iter().map(|&v| -v).collect());
                }
            }
            Op::Mul(a, b) => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                if self.wants(*a) {
                    acc(
                        grads,
                        *a,
                        g.iter().zip(bv).map(|(&gi, &bi)| gi * bi).collect(),
                    );
                }
                if self.wants(*b) {
                    acc(
                        grads,
                        *b,
                        g.iter().zip(av).map(|(&gi, &ai)| gi * ai).collect(),
                    );
                }
            }
            Op::Scale(x, c) => acc(grads, *x, g.iter().map(|&v| v * *c).collect()),
            Op::MulConst(x, c) => acc(
                grads,
                *x,
                g.iter().zip(c.iter()).map(|(&a, &b)| a * b).collect(),
            ),
            Op::Dipole(x, op) => {
                let n: usize = op.dims().iter().product();
                let mut d = Vec::with_capacity(g.len());
                for chunk in g.chunks(n) {
                    d.extend(op.apply(chunk));
                }
                acc(grads, *x, d);
            }
            Op::Grad3(x) => {
                let (c, dims) = self
                    .value(*x)
                    .activation_dims()
                    .expect("checked on forward");
                let n: usize = dims.iter().product();
                let mut d = vec![T::zero(); c * n];
                for ch in 0..c {
                    let gs = &g[3 * ch * n..3 * (ch + 1) * n];
                    let out = &mut d[ch * n..(ch + 1) * n];
                    div3_slice(&gs[..n], &gs[n..2 * n], &gs[2 * n..], dims, out);
                    for v in out.iter_mut() {
                        *v = -*v;
                    }
                }
                acc(grads, *x, d);
            }
            Op::Abs(x) => {
                let xv = self.value(*x).data();
                let d = g
                    .iter()
                    .zip(xv)
                    .map(|(&gi, &xi)| {
                        if xi > T::zero() {
                            gi
                        } else if xi < T::zero() {
                            -gi
                        } else {
                            T::zero()
                        }
                    })
                    .collect();
                acc(grads, *x, d);
            }
            Op::Square(x) => {
                let xv = self.value(*x).data();
                let two = T::of(2.0);
                acc(
                    grads,
                    *x,
                    g.iter().zip(xv).map(|(&gi, &xi)| two * gi * xi).collect(),
                );
            }
            Op::Sum(x) => acc(grads, *x, vec![g[0]; self.value(*x).len()]),
            Op::Mean(x) => {
                let n = self.value(*x).len();
                acc(grads, *x, vec![g[0] / T::of(n as f64); n]);
            }
            Op::Phasor { x, target } => {
                let xv = self.value(*x).data();
                let eps = T::of(PHASOR_EPS);
                let two = T::of(2.0);
                let d = g
                    .iter()
                    .zip(xv)
                    .zip(target.iter())
                    .map(|((&gi, &a), &b)| {
                        let delta = a - b;
                        let s = (delta / two).sin();
                        gi * delta.sin() / (T::of(4.0) * s * s + eps).sqrt()
                    })
                    .collect();
                acc(grads, *x, d);
            }
        }
    }
}

pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient of `v`, or zeros of length `len` when the loss does not depend on it.
    pub fn get_or_zeros(&self, v: Var, len: usize) -> Vec<T> {
        self.get(v)
            .map_or_else(|| vec![T::zero(); len], |g| g.to_vec())
    }
}
