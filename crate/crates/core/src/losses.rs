//! Training objectives: cycle consistency, least-squares adversarial terms, gradient
//! difference, total variation and the phasor data-consistency loss.
//!
//! Each loss is recorded on a [`Tape`] so the same graph serves training and gradient checks.
//! Networks enter as closures `(tape, input) -> output`, which lets tests substitute oracles.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::dipole::DipoleOperator;
use crate::error::{QsmError, Result};
use crate::nn::{Tape, Tensor, Var};
use crate::scalar::Real;

pub const DEFAULT_DIP_LAMBDA: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub gamma: f64,
    pub eta: f64,
    pub rho: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            gamma: 10.0,
            eta: 1.0,
            rho: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("gamma", self.gamma), ("eta", self.eta), ("rho", self.rho)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(QsmError::param(
                    name,
                    format!("must be finite and >= 0, got {v}"),
                ));
            }
        }
        Ok(())
    }
}

/// Norm used by the cycle, gradient-difference and TV terms. `L2` is the squared L2 norm.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Norm {
    #[default]
    L1,
    L2,
}

impl std::str::FromStr for Norm {
    type Err = QsmError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "l1" | "L1" => Ok(Norm::L1),
            "l2" | "L2" => Ok(Norm::L2),
            _ => Err(QsmError::param(
                "norm",
                format!("expected l1 or l2, got {s:?}"),
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossOptions {
    pub norm: Norm,
    /// Restrict cycle / gradient / TV terms to the mask. The discriminator input is always masked.
    pub mask_losses: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossReport {
    pub cycle: f64,
    pub gan_g: f64,
    pub gan_d: f64,
    pub grad: f64,
    pub tv: f64,
    pub total: f64,
}

impl LossReport {
    /// Fills `total` from the generator-side terms.
    pub fn with_total(mut self, w: &LossWeights) -> Self {
        self.total = w.gamma * self.cycle + self.gan_g + w.eta * self.grad + w.rho * self.tv;
        self
    }

    pub fn is_finite(&self) -> bool {
        [
            self.cycle, self.gan_g, self.gan_d, self.grad, self.tv, self.total,
        ]
        .iter()
        .all(|v| v.is_finite())
    }

    pub const CSV_HEADER: &'static str = "cycle,gan_g,gan_d,grad,tv,total";

    pub fn csv_row(&self) -> String {
        format!(
            "{:e},{:e},{:e},{:e},{:e},{:e}",
            self.cycle, self.gan_g, self.gan_d, self.grad, self.tv, self.total
        )
    }
}

/// A measured field patch: phase (local field) and magnitude, plus the brain mask as 0/1.
#[derive(Debug, Clone)]
pub struct FieldPatch<T: Real> {
    pub phase: Tensor<T>,
    pub magnitude: Tensor<T>,
    pub mask: Arc<Vec<T>>,
}

/// An unpaired susceptibility label patch with its mask.
#[derive(Debug, Clone)]
pub struct ChiPatch<T: Real> {
    pub chi: Tensor<T>,
    pub mask: Arc<Vec<T>>,
}

impl<T: Real> FieldPatch<T> {
    /// Generator input `[phase, magnitude]`.
    pub fn input(&self) -> Result<Tensor<T>> {
        stack(&[&self.phase, &self.magnitude])
    }
}

fn stack<T: Real>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let (_, dims) = parts[0].activation_dims()?;
    let mut data = Vec::new();
    for p in parts {
        if p.activation_dims()? != (1, dims) {
            return Err(QsmError::Shape(format!(
                "cannot stack {:?} onto {dims:?}",
                p.shape()
            )));
        }
        data.extend_from_slice(p.data());
    }
    Tensor::new(vec![parts.len(), dims[0], dims[1], dims[2]], data)
}

/// Sum of |x| (L1) or x^2 (L2) over all elements.
pub fn norm_graph<T: Real>(tape: &mut Tape<T>, x: Var, norm: Norm) -> Result<Var> {
    let y = match norm {
        Norm::L1 => tape.abs(x)?,
        Norm::L2 => tape.square(x)?,
    };
    tape.sum(y)
}

fn maybe_mask<T: Real>(tape: &mut Tape<T>, x: Var, mask: &Arc<Vec<T>>, on: bool) -> Result<Var> {
    if on {
        tape.mul_const(x, Arc::clone(mask))
    } else {
        Ok(x)
    }
}

fn mean_of<T: Real>(tape: &mut Tape<T>, terms: &[Var]) -> Result<Var> {
    let (first, rest) = terms
        .split_first()
        .ok_or_else(|| QsmError::Shape("empty batch".into()))?;
    let mut acc = *first;
    for &t in rest {
        acc = tape.add(acc, t)?;
    }
    tape.scale(acc, 1.0 / terms.len() as f64)
}

/// Generator-side reconstruction terms for one batch.
#[derive(Debug, Clone)]
pub struct CycleGraph {
    pub cycle: Var,
    pub grad: Var,
    pub tv: Var,
    /// `G(b)` for each field patch, unmasked.
    pub fakes: Vec<Var>,
}

/// Records the cycle, gradient-difference and TV terms.
///
/// Label branch: `chi -> H chi -> G([H chi, mask])`, compared with `chi`.
/// Measurement branch: `b -> G([b, magnitude]) -> H G(b)`, compared with `b`.
/// The label branch has no magnitude image, so the mask stands in for it.
pub fn cycle_graph<T, G>(
    tape: &mut Tape<T>,
    generator: &G,
    op: &Arc<DipoleOperator<T>>,
    chis: &[ChiPatch<T>],
    fields: &[FieldPatch<T>],
    opts: LossOptions,
) -> Result<CycleGraph>
where
    T: Real,
    G: Fn(&mut Tape<T>, Var) -> Result<Var>,
{
    let mut cycle_chi = Vec::new();
    let mut grad_chi = Vec::new();
    for c in chis {
        let (_, dims) = c.chi.activation_dims()?;
        let chi = tape.constant(c.chi.clone());
        let hchi = tape.dipole(chi, op)?;
        let mag = tape.constant(Tensor::new(
            vec![1, dims[0], dims[1], dims[2]],
            c.mask.to_vec(),
        )?);
        let input = tape.concat(&[hchi, mag])?;
        let recon = generator(tape, input)?;
        let diff = tape.sub(chi, recon)?;
        let diff = maybe_mask(tape, diff, &c.mask, opts.mask_losses)?;
        cycle_chi.push(norm_graph(tape, diff, opts.norm)?);
        // grad3 is linear, so grad(chi) - grad(G(H chi)) = grad(chi - G(H chi)).
        let gd = tape.grad3(diff)?;
        grad_chi.push(norm_graph(tape, gd, opts.norm)?);
    }
    let mut cycle_b = Vec::new();
    let mut grad_b = Vec::new();
    let mut tv = Vec::new();
    let mut fakes = Vec::new();
    for f in fields {
        let b = tape.constant(f.phase.clone());
        let input = tape.constant(f.input()?);
        let fake = generator(tape, input)?;
        fakes.push(fake);
        let hfake = tape.dipole(fake, op)?;
        let diff = tape.sub(b, hfake)?;
        let diff = maybe_mask(tape, diff, &f.mask, opts.mask_losses)?;
        cycle_b.push(norm_graph(tape, diff, opts.norm)?);
        let gd = tape.grad3(diff)?;
        grad_b.push(norm_graph(tape, gd, opts.norm)?);
        let fm = maybe_mask(tape, fake, &f.mask, opts.mask_losses)?;
        let gf = tape.grad3(fm)?;
        tv.push(norm_graph(tape, gf, opts.norm)?);
    }
    let c1 = mean_of(tape, &cycle_chi)?;
    let c2 = mean_of(tape, &cycle_b)?;
    let g1 = mean_of(tape, &grad_chi)?;
    let g2 = mean_of(tape, &grad_b)?;
    Ok(CycleGraph {
        cycle: tape.add(c1, c2)?,
        grad: tape.add(g1, g2)?,
        tv: mean_of(tape, &tv)?,
        fakes,
    })
}

/// Mean of `(D(x) - target)^2` over the score map.
fn lsgan_term<T, D>(tape: &mut Tape<T>, disc: &D, x: Var, target: f64) -> Result<Var>
where
    T: Real,
    D: Fn(&mut Tape<T>, Var) -> Result<Var>,
{
    let score = disc(tape, x)?;
    let shifted = if target == 0.0 {
        score
    } else {
        let t = Tensor::new(
            tape.value(score).shape().to_vec(),
            vec![T::of(target); tape.value(score).len()],
        )?;
        let t = tape.constant(t);
        tape.sub(score, t)?
    };
    let sq = tape.square(shifted)?;
    tape.mean(sq)
}

/// What the discriminator may see of a single-channel patch: `t * mask`, with voxels outside
/// the mask set to `+0` rather than multiplied, so neither the sign of a zero nor a
/// non-finite value can leak through.
pub fn mask_input<T: Real>(t: &Tensor<T>, mask: &[T]) -> Result<Tensor<T>> {
    if t.len() != mask.len() {
        return Err(QsmError::Shape(format!(
            "mask of {} voxels for a {:?} patch",
            mask.len(),
            t.shape()
        )));
    }
    let data = t
        .data()
        .iter()
        .zip(mask)
        .map(|(&a, &b)| if b == T::zero() { T::zero() } else { a * b })
        .collect();
    Tensor::new(t.shape().to_vec(), data)
}

/// Generator adversarial term `mean((D(G(b) * mask) - 1)^2)`, averaged over the batch.
pub fn gan_g_graph<T, D>(
    tape: &mut Tape<T>,
    disc: &D,
    fakes: &[Var],
    masks: &[Arc<Vec<T>>],
) -> Result<Var>
where
    T: Real,
    D: Fn(&mut Tape<T>, Var) -> Result<Var>,
{
    if fakes.len() != masks.len() {
        return Err(QsmError::Shape("one mask per fake patch required".into()));
    }
    let mut terms = Vec::new();
    for (&f, m) in fakes.iter().zip(masks) {
        let masked = tape.mul_const(f, Arc::clone(m))?;
        terms.push(lsgan_term(tape, disc, masked, 1.0)?);
    }
    mean_of(tape, &terms)
}

/// Discriminator objective `1/2 mean((D(real) - 1)^2) + 1/2 mean(D(fake)^2)` on already masked
/// inputs. Fakes enter as constants, so no gradient reaches the generator.
pub fn gan_d_graph<T, D>(
    tape: &mut Tape<T>,
    disc: &D,
    real: &[Tensor<T>],
    fake: &[Tensor<T>],
) -> Result<Var>
where
    T: Real,
    D: Fn(&mut Tape<T>, Var) -> Result<Var>,
{
    let mut r = Vec::new();
    for x in real {
        let v = tape.constant(x.clone());
        r.push(lsgan_term(tape, disc, v, 1.0)?);
    }
    let mut f = Vec::new();
    for x in fake {
        let v = tape.constant(x.clone());
        f.push(lsgan_term(tape, disc, v, 0.0)?);
    }
    let r = mean_of(tape, &r)?;
    let f = mean_of(tape, &f)?;
    let s = tape.add(r, f)?;
    tape.scale(s, 0.5)
}

/// `gamma * cycle + gan_g + eta * grad + rho * tv`.
pub fn total_graph<T: Real>(
    tape: &mut Tape<T>,
    cycle: Var,
    gan_g: Var,
    grad: Var,
    tv: Var,
    w: &LossWeights,
) -> Result<Var> {
    let c = tape.scale(cycle, w.gamma)?;
    let g = tape.scale(grad, w.eta)?;
    let t = tape.scale(tv, w.rho)?;
    let s = tape.add(c, gan_g)?;
    let s = tape.add(s, g)?;
    tape.add(s, t)
}

/// Data and regularization parts of the phasor loss.
#[derive(Debug, Clone, Copy)]
pub struct DipGraph {
    pub data: Var,
    pub reg: Var,
    pub total: Var,
}

/// `sum W |e^{j H chi} - e^{j b}| + lambda sum |grad chi|` for a single-channel `chi`.
pub fn dip_graph<T: Real>(
    tape: &mut Tape<T>,
    chi: Var,
    field: &Arc<Vec<T>>,
    weight: &Arc<Vec<T>>,
    op: &Arc<DipoleOperator<T>>,
    lambda: f64,
) -> Result<DipGraph> {
    let h = tape.dipole(chi, op)?;
    let d = tape.phasor_distance(h, Arc::clone(field))?;
    let wd = tape.mul_const(d, Arc::clone(weight))?;
    let data = tape.sum(wd)?;
    let g = tape.grad3(chi)?;
    let reg = norm_graph(tape, g, Norm::L1)?;
    let scaled = tape.scale(reg, lambda)?;
    let total = tape.add(data, scaled)?;
    Ok(DipGraph { data, reg, total })
}

/// Forward-only evaluation of the generator-side terms; the report's `gan_g`/`gan_d` are zero.
pub fn cycle_losses<T, G>(
    generator: &G,
    op: &Arc<DipoleOperator<T>>,
    chis: &[ChiPatch<T>],
    fields: &[FieldPatch<T>],
    opts: LossOptions,
) -> Result<LossReport>
where
    T: Real,
    G: Fn(&mut Tape<T>, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let g = cycle_graph(&mut tape, generator, op, chis, fields, opts)?;
    Ok(LossReport {
        cycle: tape.value(g.cycle).item().as_f64(),
        grad: tape.value(g.grad).item().as_f64(),
        tv: tape.value(g.tv).item().as_f64(),
        ..LossReport::default()
    })
}

/// Forward-only `(gan_d, gan_g)` for masked real and fake patches.
pub fn lsgan_losses<T, D>(disc: &D, real: &[Tensor<T>], fake: &[Tensor<T>]) -> Result<(f64, f64)>
where
    T: Real,
    D: Fn(&mut Tape<T>, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let d = gan_d_graph(&mut tape, disc, real, fake)?;
    let mut g_terms = Vec::new();
    for x in fake {
        let v = tape.constant(x.clone());
        g_terms.push(lsgan_term(&mut tape, disc, v, 1.0)?);
    }
    let g = mean_of(&mut tape, &g_terms)?;
    Ok((tape.value(d).item().as_f64(), tape.value(g).item().as_f64()))
}

/// Forward-only phasor loss for a susceptibility map.
pub fn dip_loss(
    chi: &crate::RealVolume,
    field: &crate::RealVolume,
    weight: &crate::RealVolume,
    kernel: &crate::DipoleKernel,
    lambda: f64,
) -> Result<f64> {
    chi.meta.ensure_same(&field.meta, "field")?;
    chi.meta.ensure_same(&weight.meta, "weight")?;
    chi.meta.ensure_same(&kernel.meta, "kernel")?;
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::from_volume_data(chi.meta.dims, &chi.data)?);
    let op = Arc::new(kernel.operator());
    let g = dip_graph(
        &mut tape,
        x,
        &Arc::new(field.data.clone()),
        &Arc::new(weight.data.clone()),
        &op,
        lambda,
    )?;
    Ok(tape.value(g.total).item())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dipole::{build_dipole, forward_field, naive_inverse};
    use crate::volume::{RealVolume, VolumeMeta};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_vol(meta: VolumeMeta, seed: u64) -> RealVolume {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        RealVolume::from_fn(meta, |_, _, _| rng.random_range(-1.0..1.0))
    }

    fn tensor(v: &RealVolume) -> Tensor<f64> {
        Tensor::from_volume_data(v.meta.dims, &v.data).unwrap()
    }

    fn ones(n: usize) -> Arc<Vec<f64>> {
        Arc::new(vec![1.0; n])
    }

    fn zero_generator(tape: &mut Tape<f64>, x: Var) -> Result<Var> {
        let (_, d) = tape.value(x).activation_dims()?;
        Ok(tape.constant(Tensor::zeros(vec![1, d[0], d[1], d[2]])))
    }

    /// Loop oracle: sum over voxels and components of |forward difference|, replicate boundary.
    fn loop_tv(v: &RealVolume) -> f64 {
        let [nx, ny, nz] = v.meta.dims;
        let mut s = 0.0;
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    let c = v.at(x, y, z);
                    if x + 1 < nx {
                        s += (v.at(x + 1, y, z) - c).abs();
                    }
                    if y + 1 < ny {
                        s += (v.at(x, y + 1, z) - c).abs();
                    }
                    if z + 1 < nz {
                        s += (v.at(x, y, z + 1) - c).abs();
                    }
                }
            }
        }
        s
    }

    #[test]
    fn zero_generator_cycle_is_norm_of_inputs() {
        let meta = VolumeMeta::isotropic([4, 4, 4]);
        let chi = random_vol(meta, 1);
        let b = random_vol(meta, 2);
        let kernel = build_dipole(meta).unwrap();
        let op = Arc::new(kernel.operator());
        let n = meta.len();
        let chis = [ChiPatch {
            chi: tensor(&chi),
            mask: ones(n),
        }];
        let fields = [FieldPatch {
            phase: tensor(&b),
            magnitude: tensor(&RealVolume::constant(meta, 1.0)),
            mask: ones(n),
        }];
        let r = cycle_losses(&zero_generator, &op, &chis, &fields, LossOptions::default()).unwrap();
        let l1 = |v: &RealVolume| v.data.iter().map(|x| x.abs()).sum::<f64>();
        assert!((r.cycle - (l1(&chi) + l1(&b))).abs() < 1e-10);
        assert!((r.grad - (loop_tv(&chi) + loop_tv(&b))).abs() < 1e-10);
        assert_eq!(r.tv, 0.0);
    }

    #[test]
    fn oracle_generator_is_a_fixed_point() {
        let meta = VolumeMeta::isotropic([8, 8, 8]);
        let kernel = build_dipole(meta).unwrap();
        let op = Arc::new(kernel.operator());
        let chi = crate::dipole::tests::band_limited(&kernel, 0.1, 3);
        let b = forward_field(&chi, &kernel).unwrap();
        let oracle = |tape: &mut Tape<f64>, x: Var| -> Result<Var> {
            let n = meta.len();
            let phase = RealVolume::new(meta, tape.value(x).data()[..n].to_vec())?;
            let inv = naive_inverse(&phase, &kernel, 0.1)?;
            Ok(tape.constant(tensor(&inv)))
        };
        let n = meta.len();
        let chis = [ChiPatch {
            chi: tensor(&chi),
            mask: ones(n),
        }];
        let fields = [FieldPatch {
            phase: tensor(&b),
            magnitude: tensor(&RealVolume::constant(meta, 1.0)),
            mask: ones(n),
        }];
        let r = cycle_losses(&oracle, &op, &chis, &fields, LossOptions::default()).unwrap();
        assert!(r.cycle < 1e-6, "{}", r.cycle);
        assert!(r.grad < 1e-6, "{}", r.grad);
    }

    #[test]
    fn tv_of_a_step_is_height_times_area() {
        let meta = VolumeMeta::isotropic([6, 5, 4]);
        let h = 0.3;
        let v = RealVolume::from_fn(meta, |x, _, _| if x >= 3 { h } else { 0.0 });
        let constant_gen =
            |tape: &mut Tape<f64>, _x: Var| -> Result<Var> { Ok(tape.constant(tensor(&v))) };
        let op = Arc::new(build_dipole(meta).unwrap().operator());
        let n = meta.len();
        let fields = [FieldPatch {
            phase: tensor(&RealVolume::zeros(meta)),
            magnitude: tensor(&RealVolume::zeros(meta)),
            mask: ones(n),
        }];
        let chis = [ChiPatch {
            chi: tensor(&RealVolume::zeros(meta)),
            mask: ones(n),
        }];
        let r = cycle_losses(&constant_gen, &op, &chis, &fields, LossOptions::default()).unwrap();
        assert!((r.tv - h * 5.0 * 4.0).abs() < 1e-12);

        let rnd = random_vol(meta, 9);
        let gen =
            |tape: &mut Tape<f64>, _x: Var| -> Result<Var> { Ok(tape.constant(tensor(&rnd))) };
        let r = cycle_losses(&gen, &op, &chis, &fields, LossOptions::default()).unwrap();
        assert!((r.tv - loop_tv(&rnd)).abs() < 1e-6);
    }

    #[test]
    fn constant_fields_have_no_gradient_difference() {
        let meta = VolumeMeta::isotropic([4, 4, 4]);
        let c = RealVolume::constant(meta, 0.2);
        let gen = |tape: &mut Tape<f64>, _x: Var| -> Result<Var> { Ok(tape.constant(tensor(&c))) };
        let op = Arc::new(build_dipole(meta).unwrap().operator());
        let n = meta.len();
        let chis = [ChiPatch {
            chi: tensor(&RealVolume::constant(meta, -0.1)),
            mask: ones(n),
        }];
        let fields = [FieldPatch {
            phase: tensor(&RealVolume::zeros(meta)),
            magnitude: tensor(&RealVolume::zeros(meta)),
            mask: ones(n),
        }];
        let r = cycle_losses(&gen, &op, &chis, &fields, LossOptions::default()).unwrap();
        // H of a constant is zero (the DC term of the kernel is 0), so the field branch is flat too.
        assert!(r.grad.abs() < 1e-12, "{}", r.grad);
        assert!(r.tv.abs() < 1e-12);
    }

    #[test]
    fn lsgan_fixed_points() {
        let shape = vec![1, 2, 2, 2];
        let real = [Tensor::<f64>::new(shape.clone(), vec![1.0; 8]).unwrap()];
        let fake = [Tensor::<f64>::zeros(shape)];
        // An identity "discriminator" scores real as 1 and fake as 0.
        let ident = |_: &mut Tape<f64>, x: Var| -> Result<Var> { Ok(x) };
        let (d, g) = lsgan_losses(&ident, &real, &fake).unwrap();
        assert_eq!(d, 0.0);
        assert_eq!(g, 1.0);
        let zero = |tape: &mut Tape<f64>, x: Var| tape.scale(x, 0.0);
        let (d, g) = lsgan_losses(&zero, &real, &fake).unwrap();
        assert_eq!(g, 1.0);
        assert_eq!(d, 0.5);
    }

    #[test]
    fn total_identity_and_linearity() {
        let r = LossReport {
            cycle: 0.7,
            gan_g: 0.3,
            gan_d: 0.2,
            grad: 1.1,
            tv: 2.5,
            total: 0.0,
        };
        let w = LossWeights::default();
        let t = r.with_total(&w).total;
        assert!((t - (10.0 * 0.7 + 0.3 + 1.1 + 0.25)).abs() < 1e-12);
        let zero = LossWeights {
            gamma: 0.0,
            eta: 0.0,
            rho: 0.0,
        };
        assert_eq!(r.with_total(&zero).total, 0.3);
        let doubled = LossWeights { gamma: 20.0, ..w };
        assert!((r.with_total(&doubled).total - t - 10.0 * 0.7).abs() < 1e-12);

        let mut tape = Tape::<f64>::new();
        let v: Vec<Var> = [0.7, 0.3, 1.1, 2.5]
            .iter()
            .map(|&x| tape.constant(Tensor::scalar(x)))
            .collect();
        let tot = total_graph(&mut tape, v[0], v[1], v[2], v[3], &w).unwrap();
        assert!((tape.value(tot).item() - t).abs() < 1e-12);
    }

    #[test]
    fn dip_loss_fixed_point_and_antipode() {
        let meta = VolumeMeta::isotropic([4, 4, 4]);
        let kernel = build_dipole(meta).unwrap();
        let chi = random_vol(meta, 5);
        let b = forward_field(&chi, &kernel).unwrap();
        let w = RealVolume::constant(meta, 1.0);
        let data_only = dip_loss(&chi, &b, &w, &kernel, 0.0).unwrap();
        assert!(data_only < 1e-5, "{data_only}");

        let zero = RealVolume::zeros(meta);
        let mut field = RealVolume::zeros(meta);
        field.data[7] = std::f64::consts::PI;
        let l = dip_loss(&zero, &field, &w, &kernel, 0.0).unwrap();
        assert!((l - 2.0).abs() < 1e-5, "{l}");
        // The regularizer adds lambda * TV.
        let l = dip_loss(&chi, &b, &w, &kernel, 0.5).unwrap();
        assert!((l - data_only - 0.5 * loop_tv(&chi)).abs() < 1e-9);
    }

    #[test]
    fn masked_losses_ignore_outside() {
        let meta = VolumeMeta::isotropic([4, 4, 4]);
        let op = Arc::new(build_dipole(meta).unwrap().operator());
        let mut mask = vec![0.0; meta.len()];
        mask[..32].fill(1.0);
        let mask = Arc::new(mask);
        let chi = random_vol(meta, 2);
        let mut poisoned = chi.clone();
        for (v, m) in poisoned.data.iter_mut().zip(mask.iter()) {
            if *m == 0.0 {
                *v = 0.0;
            }
        }
        let opts = LossOptions {
            mask_losses: true,
            ..LossOptions::default()
        };
        let gen = |tape: &mut Tape<f64>, x: Var| -> Result<Var> {
            let (_, d) = tape.value(x).activation_dims()?;
            Ok(tape.constant(Tensor::zeros(vec![1, d[0], d[1], d[2]])))
        };
        let make = |c: &RealVolume| {
            let chis = [ChiPatch {
                chi: tensor(c),
                mask: Arc::clone(&mask),
            }];
            let fields = [FieldPatch {
                phase: tensor(&RealVolume::zeros(meta)),
                magnitude: tensor(&RealVolume::zeros(meta)),
                mask: Arc::clone(&mask),
            }];
            cycle_losses(&gen, &op, &chis, &fields, opts).unwrap().cycle
        };
        assert!((make(&chi) - make(&poisoned)).abs() < 1e-12);
    }
}
