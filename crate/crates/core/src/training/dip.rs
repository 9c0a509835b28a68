use std::fmt::Write as _;
use std::sync::Arc;

use log::warn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::cycle::{augment_draw, common_geometry, field_patch, rotation_axis};
use super::patches::{augment, cut, draw_patches};
use super::{TrainConfig, UnpairedDataset};
use crate::classical::magnitude_weight;
use crate::dipole::{build_dipole, DipoleKernel};
use crate::error::{QsmError, Result};
use crate::losses::{dip_graph, DEFAULT_DIP_LAMBDA};
use crate::nn::{Adam, AdamConfig, Generator, GeneratorConfig, ParamSet, Tape, Tensor};
use crate::scalar::Real;
use crate::volume::{Mask, RealVolume};

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct DipTraceRow {
    /// 0 for per-volume DIP.
    pub epoch: usize,
    pub iteration: usize,
    pub data: f64,
    pub reg: f64,
    pub total: f64,
}

impl DipTraceRow {
    pub const CSV_HEADER: &'static str = "epoch,iteration,data,reg,total";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{:e},{:e},{:e}",
            self.epoch, self.iteration, self.data, self.reg, self.total
        )
    }
}

pub fn trace_csv(rows: &[DipTraceRow]) -> String {
    let mut s = String::from(DipTraceRow::CSV_HEADER);
    s.push('\n');
    for r in rows {
        let _ = writeln!(s, "{}", r.csv_row());
    }
    s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DipConfig {
    pub lambda: f64,
    pub iters: usize,
    pub lr: f64,
    pub seed: u64,
    /// Half the cycle generator's width by default.
    pub generator: GeneratorConfig,
    /// The fixed input is uniform on `[0, noise_scale)`.
    pub noise_scale: f64,
}

impl Default for DipConfig {
    fn default() -> Self {
        let full = GeneratorConfig::default();
        Self {
            lambda: DEFAULT_DIP_LAMBDA,
            iters: 500,
            lr: 1e-3,
            seed: 0,
            generator: GeneratorConfig {
                base_channels: full.base_channels / 2,
                in_channels: 1,
                ..full
            },
            noise_scale: 0.1,
        }
    }
}

impl DipConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(QsmError::param("lambda", "must be finite and non-negative"));
        }
        if self.iters == 0 {
            return Err(QsmError::param("iters", "must be positive"));
        }
        if !(self.noise_scale.is_finite() && self.noise_scale > 0.0) {
            return Err(QsmError::param("noise_scale", "must be positive"));
        }
        AdamConfig {
            lr: self.lr,
            ..AdamConfig::default()
        }
        .validate()?;
        self.generator.validate()
    }
}

#[derive(Debug, Clone)]
pub struct DipResult {
    /// Output at the lowest objective seen, zero outside the mask.
    pub chi: RealVolume,
    pub trace: Vec<DipTraceRow>,
    pub best_iteration: usize,
}

fn arc<T: Real>(v: &[f64]) -> Arc<Vec<T>> {
    Arc::new(v.iter().map(|&x| T::of(x)).collect())
}

/// Deep image prior: fits a fresh generator, fed a fixed noise tensor, to one field map under
/// the phasor loss. No training data is involved.
pub fn optimize_dip<T: Real>(
    field: &RealVolume,
    magnitude: &RealVolume,
    mask: &Mask,
    kernel: &DipoleKernel,
    cfg: &DipConfig,
) -> Result<DipResult> {
    cfg.validate()?;
    field.meta.ensure_same(&kernel.meta, "kernel")?;
    let dims = field.meta.dims;
    cfg.generator.check_dims(dims)?;
    let weight = magnitude_weight(magnitude, mask)?;
    let mut g = Generator::<T>::new(cfg.generator, cfg.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed);
    let c = cfg.generator.in_channels;
    let noise: Vec<T> = (0..c * field.meta.len())
        .map(|_| T::of(rng.random::<f64>() * cfg.noise_scale))
        .collect();
    let noise = Tensor::new(vec![c, dims[0], dims[1], dims[2]], noise)?;
    let op = Arc::new(kernel.operator::<T>());
    let b = arc::<T>(&field.data);
    let w = arc::<T>(&weight.data);
    let mut adam = Adam::new(
        AdamConfig {
            lr: cfg.lr,
            ..AdamConfig::default()
        },
        g.params(),
    )?;

    let mut trace = Vec::with_capacity(cfg.iters);
    let mut best: Option<(f64, usize, Vec<T>)> = None;
    for it in 0..cfg.iters {
        let step = (|| {
            let mut tape = Tape::new();
            let p = g.params().bind(&mut tape, true);
            let x = tape.constant(noise.clone());
            let y = g.forward(&mut tape, &p, x)?;
            let loss = dip_graph(&mut tape, y, &b, &w, &op, cfg.lambda)?;
            let row = DipTraceRow {
                epoch: 0,
                iteration: it,
                data: tape.value(loss.data).item().as_f64(),
                reg: tape.value(loss.reg).item().as_f64(),
                total: tape.value(loss.total).item().as_f64(),
            };
            let out = tape.value(y).data().to_vec();
            let grads = tape.backward(loss.total)?;
            Ok::<_, QsmError>((row, out, g.params().collect_grads(&grads, &p)))
        })();
        let (row, out, grads) = step.map_err(|e| halt(e, it))?;
        if best.as_ref().is_none_or(|(t, _, _)| row.total < *t) {
            best = Some((row.total, it, out));
        }
        trace.push(row);
        adam.step(g.params_mut(), &grads).map_err(|e| halt(e, it))?;
    }
    let (_, best_iteration, out) = best.expect("at least one iteration");
    let data = out
        .iter()
        .zip(&mask.data)
        .map(|(&v, &m)| if m { v.as_f64() } else { 0.0 })
        .collect();
    Ok(DipResult {
        chi: RealVolume::new(field.meta, data)?,
        trace,
        best_iteration,
    })
}

fn halt(e: QsmError, it: usize) -> QsmError {
    if e.is_numerical() {
        QsmError::Diverged(format!("iteration {it}: {e}"))
    } else {
        e
    }
}

#[derive(Debug, Clone)]
pub struct UqsmOutcome {
    pub trace: Vec<DipTraceRow>,
    /// Set when a non-finite loss stopped training; parameters are then those of the last
    /// completed epoch.
    pub halted: Option<String>,
}

/// Unsupervised training on field patches alone with the phasor loss; no labels and no
/// discriminator. Patches, augmentation and the rng stream follow [`super::train_cycleqsm`].
pub fn train_uqsm<T: Real>(
    ds: &UnpairedDataset,
    g: &mut Generator<T>,
    cfg: &TrainConfig,
) -> Result<UqsmOutcome> {
    let cfg = TrainConfig {
        adversarial: false,
        ..cfg.clone()
    };
    cfg.validate()?;
    ds.validate()?;
    if g.config().in_channels != 2 {
        return Err(QsmError::param(
            "generator",
            "uQSM feeds two input channels",
        ));
    }
    let meta = common_geometry(ds)?;
    let rot = rotation_axis(&meta);
    let patch = cfg.patch_dims();
    let op = Arc::new(build_dipole(meta.with_dims(patch))?.operator::<T>());
    // Weight = magnitude / mean magnitude in the mask, per case.
    let scale: Vec<f64> = ds
        .field_cases
        .iter()
        .map(|c| {
            let (sum, n) = c
                .magnitude
                .data
                .iter()
                .zip(&c.mask.data)
                .filter(|(_, &m)| m)
                .fold((0.0, 0usize), |(s, n), (v, _)| (s + v, n + 1));
            if n == 0 || sum <= 0.0 {
                Err(QsmError::param("magnitude", "is zero over the mask"))
            } else {
                Ok(n as f64 / sum)
            }
        })
        .collect::<Result<_>>()?;
    let labels_free = UnpairedDataset {
        field_cases: ds.field_cases.clone(),
        chi_volumes: Vec::new(),
    };
    let mut adam = Adam::new(cfg.adam(), g.params())?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut good: ParamSet<T> = g.params().clone();
    let mut trace = Vec::new();
    for epoch in 1..=cfg.epochs {
        for step in 0..cfg.steps_per_epoch() {
            let result = (|| {
                let draws = draw_patches(&labels_free, patch, cfg.batch_size, &mut rng)?;
                let mut tape = Tape::new();
                let p = g.params().bind(&mut tape, true);
                let mut totals = Vec::new();
                let (mut data, mut reg) = (0.0, 0.0);
                for d in &draws {
                    let group = cut(&labels_free, d, patch).field;
                    let group = augment(&group, augment_draw(&cfg, &mut rng, &meta), rot)?;
                    let fp = field_patch::<T>(&group)?;
                    let s = scale[d.field_case];
                    let w: Vec<f64> = group.channels[1]
                        .iter()
                        .zip(&group.channels[2])
                        .map(|(m, k)| m * k * s)
                        .collect();
                    let input = tape.constant(fp.input()?);
                    let chi = g.forward(&mut tape, &p, input)?;
                    let l = dip_graph(
                        &mut tape,
                        chi,
                        &arc(&group.channels[0]),
                        &arc(&w),
                        &op,
                        cfg.dip_lambda,
                    )?;
                    data += tape.value(l.data).item().as_f64();
                    reg += tape.value(l.reg).item().as_f64();
                    totals.push(l.total);
                }
                let mut sum = totals[0];
                for &t in &totals[1..] {
                    sum = tape.add(sum, t)?;
                }
                let n = totals.len() as f64;
                let loss = tape.scale(sum, 1.0 / n)?;
                let row = DipTraceRow {
                    epoch,
                    iteration: step,
                    data: data / n,
                    reg: reg / n,
                    total: tape.value(loss).item().as_f64(),
                };
                let grads = tape.backward(loss)?;
                let grads = g.params().collect_grads(&grads, &p);
                adam.step(g.params_mut(), &grads)?;
                Ok::<_, QsmError>(row)
            })();
            match result {
                Ok(row) => trace.push(row),
                Err(e) if e.is_numerical() => {
                    let why = format!("epoch {epoch} step {step}: {e}");
                    warn!("uQSM training halted at {why}");
                    g.params_mut().load_from(&good)?;
                    return Ok(UqsmOutcome {
                        trace,
                        halted: Some(why),
                    });
                }
                Err(e) => return Err(e),
            }
        }
        good = g.params().clone();
    }
    Ok(UqsmOutcome {
        trace,
        halted: None,
    })
}
