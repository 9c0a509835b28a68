use std::fmt::Write as _;
use std::path::Path;
use std::sync::Arc;

use log::{info, warn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::patches::{augment, cut, draw_patches, Augmentation, PatchGroup};
use super::{TrainConfig, UnpairedDataset};
use crate::dipole::{build_dipole, DipoleOperator};
use crate::error::{QsmError, Result};
use crate::losses::{
    cycle_graph, gan_d_graph, gan_g_graph, mask_input, total_graph, ChiPatch, FieldPatch,
    LossReport,
};
use crate::nn::checkpoint::{save_discriminator, save_generator};
use crate::nn::{Adam, Discriminator, Generator, ParamSet, Tape, Tensor};
use crate::scalar::Real;
use crate::volume::VolumeMeta;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: usize,
    pub report: LossReport,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<StepRecord>,
}

impl TrainLog {
    pub const CSV_HEADER: &'static str = "epoch,step,cycle,gan_g,gan_d,grad,tv,total";

    pub fn to_csv(&self) -> String {
        let mut s = String::from(Self::CSV_HEADER);
        s.push('\n');
        for r in &self.records {
            let _ = writeln!(s, "{},{},{}", r.epoch, r.step, r.report.csv_row());
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        Ok(std::fs::write(path, self.to_csv())?)
    }

    /// Per-epoch mean of one loss column, in epoch order.
    pub fn epoch_means(&self, column: impl Fn(&LossReport) -> f64) -> Vec<f64> {
        let mut out: Vec<(usize, f64, usize)> = Vec::new();
        for r in &self.records {
            match out.last_mut() {
                Some((e, s, n)) if *e == r.epoch => {
                    *s += column(&r.report);
                    *n += 1;
                }
                _ => out.push((r.epoch, column(&r.report), 1)),
            }
        }
        out.into_iter().map(|(_, s, n)| s / n as f64).collect()
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub log: TrainLog,
    /// Set when a non-finite loss or gradient stopped training. The networks then hold the
    /// parameters from the end of `last_good_epoch` (0 = initial).
    pub halted: Option<String>,
    pub last_good_epoch: usize,
}

/// Shared patch geometry of the dataset; all volumes must agree on voxel size and B0.
pub(super) fn common_geometry(ds: &UnpairedDataset) -> Result<VolumeMeta> {
    let first = ds.field_cases[0].field.meta;
    let metas = ds
        .field_cases
        .iter()
        .map(|c| c.field.meta)
        .chain(ds.chi_volumes.iter().map(|l| l.chi.meta));
    for m in metas {
        if m.voxel_size != first.voxel_size || m.b0_dir != first.b0_dir {
            return Err(QsmError::DimMismatch(format!(
                "dataset mixes geometries: {:?}/{:?} vs {:?}/{:?}",
                first.voxel_size, first.b0_dir, m.voxel_size, m.b0_dir
            )));
        }
    }
    Ok(first)
}

/// B0 axis usable for rotations: axis-aligned B0 and equal in-plane voxel sizes.
pub(super) fn rotation_axis(meta: &VolumeMeta) -> Option<usize> {
    let a = meta.b0_axis()?;
    let s = meta.voxel_size;
    let (p, q) = ((a + 1) % 3, (a + 2) % 3);
    if s[p] == s[q] {
        Some(a)
    } else {
        info!(
            "in-plane voxel sizes {} and {} differ; rotation skipped",
            s[p], s[q]
        );
        None
    }
}

pub(super) fn augment_draw(
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
    meta: &VolumeMeta,
) -> Augmentation {
    if cfg.augment {
        Augmentation::draw(rng, meta.b0_dir)
    } else {
        Augmentation::default()
    }
}

fn tensor<T: Real>(dims: [usize; 3], v: &[f64]) -> Result<Tensor<T>> {
    Tensor::from_volume_data(dims, v)
}

fn arc<T: Real>(v: &[f64]) -> Arc<Vec<T>> {
    Arc::new(v.iter().map(|&x| T::of(x)).collect())
}

pub(super) fn field_patch<T: Real>(g: &PatchGroup) -> Result<FieldPatch<T>> {
    Ok(FieldPatch {
        phase: tensor(g.dims, &g.channels[0])?,
        magnitude: tensor(g.dims, &g.channels[1])?,
        mask: arc(&g.channels[2]),
    })
}

fn chi_patch<T: Real>(g: &PatchGroup) -> Result<ChiPatch<T>> {
    Ok(ChiPatch {
        chi: tensor(g.dims, &g.channels[0])?,
        mask: arc(&g.channels[1]),
    })
}

struct Batch<T: Real> {
    fields: Vec<FieldPatch<T>>,
    chis: Vec<ChiPatch<T>>,
}

fn next_batch<T: Real>(
    ds: &UnpairedDataset,
    cfg: &TrainConfig,
    meta: &VolumeMeta,
    rot: Option<usize>,
    rng: &mut ChaCha8Rng,
) -> Result<Batch<T>> {
    let patch = cfg.patch_dims();
    let draws = draw_patches(ds, patch, cfg.batch_size, rng)?;
    let mut fields = Vec::with_capacity(draws.len());
    let mut chis = Vec::with_capacity(draws.len());
    for d in &draws {
        let pair = cut(ds, d, patch);
        // Field and label come from unrelated volumes, so each gets its own draw.
        let fa = augment_draw(cfg, rng, meta);
        let ca = augment_draw(cfg, rng, meta);
        fields.push(field_patch(&augment(&pair.field, fa, rot)?)?);
        chis.push(chi_patch(&augment(&pair.chi, ca, rot)?)?);
    }
    Ok(Batch { fields, chis })
}

/// One generator update followed by `d_steps_per_g_step` discriminator updates.
fn train_step<T: Real>(
    batch: &Batch<T>,
    op: &Arc<DipoleOperator<T>>,
    g: &mut Generator<T>,
    d: &mut Discriminator<T>,
    adam_g: &mut Adam<T>,
    adam_d: &mut Adam<T>,
    cfg: &TrainConfig,
) -> Result<LossReport> {
    let masks: Vec<Arc<Vec<T>>> = batch.fields.iter().map(|f| Arc::clone(&f.mask)).collect();
    let mut report = LossReport::default();
    let (grads, fakes) = {
        let mut tape = Tape::new();
        let pg = g.params().bind(&mut tape, true);
        let gen_fn = |t: &mut Tape<T>, x| g.forward(t, &pg, x);
        let cg = cycle_graph(&mut tape, &gen_fn, op, &batch.chis, &batch.fields, cfg.loss)?;
        let gan_g = if cfg.adversarial {
            let pd = d.params().bind(&mut tape, false);
            let disc_fn = |t: &mut Tape<T>, x| d.forward(t, &pd, x);
            gan_g_graph(&mut tape, &disc_fn, &cg.fakes, &masks)?
        } else {
            tape.constant(Tensor::scalar(T::zero()))
        };
        let total = total_graph(&mut tape, cg.cycle, gan_g, cg.grad, cg.tv, &cfg.weights)?;
        let item = |v| tape.value(v).item().as_f64();
        report.cycle = item(cg.cycle);
        report.gan_g = item(gan_g);
        report.grad = item(cg.grad);
        report.tv = item(cg.tv);
        report.total = item(total);
        let fakes: Vec<Tensor<T>> = cg
            .fakes
            .iter()
            .zip(&masks)
            .map(|(&f, m)| mask_input(tape.value(f), m))
            .collect::<Result<_>>()?;
        let grads = tape.backward(total)?;
        (g.params().collect_grads(&grads, &pg), fakes)
    };
    adam_g.step(g.params_mut(), &grads)?;

    if cfg.adversarial {
        let real: Vec<Tensor<T>> = batch
            .chis
            .iter()
            .map(|c| mask_input(&c.chi, &c.mask))
            .collect::<Result<_>>()?;
        for _ in 0..cfg.d_steps_per_g_step {
            let mut tape = Tape::new();
            let pd = d.params().bind(&mut tape, true);
            let disc_fn = |t: &mut Tape<T>, x| d.forward(t, &pd, x);
            let loss = gan_d_graph(&mut tape, &disc_fn, &real, &fakes)?;
            report.gan_d = tape.value(loss).item().as_f64();
            let grads = tape.backward(loss)?;
            let grads = d.params().collect_grads(&grads, &pd);
            adam_d.step(d.params_mut(), &grads)?;
        }
    }
    if !report.is_finite() {
        return Err(QsmError::NonFinite(format!("loss report {report:?}")));
    }
    Ok(report)
}

fn save_epoch<T: Real>(
    dir: &Path,
    tag: &str,
    g: &Generator<T>,
    d: &Discriminator<T>,
    adversarial: bool,
) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    save_generator(&dir.join(format!("generator_{tag}.dbc")), g)?;
    if adversarial {
        save_discriminator(&dir.join(format!("discriminator_{tag}.dbc")), d)?;
    }
    Ok(())
}

/// Unpaired cycleGAN training with the dipole operator as the fixed second generator.
///
/// Each step samples `batch_size` field patches and, independently, as many label patches;
/// updates G on `gamma*cycle + gan_g + eta*grad + rho*tv` with D frozen; then updates D on the
/// LSGAN objective with real labels and detached generator outputs, both multiplied by their
/// masks. Everything is driven by one ChaCha stream seeded from `cfg.seed`.
pub fn train_cycleqsm<T: Real>(
    ds: &UnpairedDataset,
    g: &mut Generator<T>,
    d: &mut Discriminator<T>,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    ds.validate()?;
    if ds.chi_volumes.is_empty() {
        return Err(QsmError::param("dataset", "no susceptibility labels"));
    }
    if g.config().in_channels != 2 {
        return Err(QsmError::param(
            "generator",
            "cycle training feeds two input channels",
        ));
    }
    let meta = common_geometry(ds)?;
    let rot = rotation_axis(&meta);
    let kernel = build_dipole(meta.with_dims(cfg.patch_dims()))?;
    let op = Arc::new(kernel.operator::<T>());
    let mut adam_g = Adam::new(cfg.adam(), g.params())?;
    let mut adam_d = Adam::new(cfg.adam(), d.params())?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let mut good_g: ParamSet<T> = g.params().clone();
    let mut good_d: ParamSet<T> = d.params().clone();
    let mut last_good_epoch = 0;
    let mut log = TrainLog::default();
    let steps = cfg.steps_per_epoch();
    for epoch in 1..=cfg.epochs {
        for step in 0..steps {
            let result = next_batch(ds, cfg, &meta, rot, &mut rng)
                .and_then(|b| train_step(&b, &op, g, d, &mut adam_g, &mut adam_d, cfg));
            match result {
                Ok(report) => log.records.push(StepRecord {
                    epoch,
                    step,
                    report,
                }),
                Err(e) if e.is_numerical() => {
                    let why =
                        format!("epoch {epoch} step {step}: {e}; restored epoch {last_good_epoch}");
                    warn!("training halted at {why}");
                    g.params_mut().load_from(&good_g)?;
                    d.params_mut().load_from(&good_d)?;
                    if let Some(dir) = &cfg.checkpoint_dir {
                        save_epoch(dir, "last_good", g, d, cfg.adversarial)?;
                    }
                    return Ok(TrainOutcome {
                        log,
                        halted: Some(why),
                        last_good_epoch,
                    });
                }
                Err(e) => return Err(e),
            }
        }
        good_g = g.params().clone();
        good_d = d.params().clone();
        last_good_epoch = epoch;
        if let Some(dir) = &cfg.checkpoint_dir {
            save_epoch(dir, &format!("epoch{epoch:03}"), g, d, cfg.adversarial)?;
        }
        let means = log.epoch_means(|r| r.cycle);
        info!(
            "epoch {epoch}/{}: mean cycle {:.4e}",
            cfg.epochs,
            means.last().copied().unwrap_or(0.0)
        );
    }
    Ok(TrainOutcome {
        log,
        halted: None,
        last_good_epoch,
    })
}
