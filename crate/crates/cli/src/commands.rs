use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use log::info;
use qsm_core::classical::{
    build_medi_weights, cg_least_squares, medi_invert, tkd_invert, MediParams, TkdParams, TraceRow,
};
use qsm_core::config::{parse_phantom_spec, read_key_values};
use qsm_core::gradcheck::{run_all, TOL_F32, TOL_F64};
use qsm_core::metrics::{psnr, rmse, roi_regression, ssim3, RegressionMode, RoiSet, SsimParams};
use qsm_core::nn::checkpoint::{load_generator, save_discriminator, save_generator};
use qsm_core::nn::{Discriminator, Generator, GeneratorConfig};
use qsm_core::phantom::{add_noise, head_mask, make_phantom, random_piecewise, SimulatedCase};
use qsm_core::training::{
    infer_stitched, optimize_dip, trace_csv, train_cycleqsm, train_uqsm, Blend, ChiLabel,
    DipConfig, InferConfig, TrainConfig, UnpairedDataset,
};
use qsm_core::{
    build_dipole, forward_field, naive_inverse, Mask, QsmError, RealVolume, VolumeMeta,
};

use crate::args::*;

/// Failure classes mapped to exit codes 1 and 2.
#[derive(Debug)]
pub enum CliError {
    Input(String),
    Numerical(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Input(_) => 1,
            CliError::Numerical(_) => 2,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Input(m) => write!(f, "input error: {m}"),
            CliError::Numerical(m) => write!(f, "numerical failure: {m}"),
        }
    }
}

impl From<QsmError> for CliError {
    fn from(e: QsmError) -> Self {
        if e.is_numerical() {
            CliError::Numerical(e.to_string())
        } else {
            CliError::Input(e.to_string())
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn input(msg: impl Into<String>) -> CliError {
    CliError::Input(msg.into())
}

/// Attaches the file name to load/save failures.
fn at<T>(path: &Path, r: qsm_core::Result<T>) -> Result<T> {
    r.map_err(|e| match CliError::from(e) {
        CliError::Input(m) => CliError::Input(format!("{}: {m}", path.display())),
        n => n,
    })
}

fn read(path: &Path) -> Result<RealVolume> {
    at(path, qsm_core::read_volume(path))
}

fn write(v: &RealVolume, path: &Path) -> Result<()> {
    at(path, qsm_core::write_volume(v, path))?;
    info!("wrote {}", path.display());
    Ok(())
}

fn read_mask(path: &Path) -> Result<Mask> {
    let v = read(path)?;
    at(path, Mask::from_volume(&v))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| input(format!("{}: {e}", path.display())))
}

fn same_grid(a: &VolumeMeta, b: &VolumeMeta, what: &Path) -> Result<()> {
    if a.same_grid(b) {
        Ok(())
    } else {
        Err(input(format!(
            "{}: grid {:?}/{:?} does not match {:?}/{:?}",
            what.display(),
            b.dims,
            b.voxel_size,
            a.dims,
            a.voxel_size
        )))
    }
}

fn maybe_masked(v: RealVolume, mask: &Option<PathBuf>) -> Result<RealVolume> {
    match mask {
        Some(p) => {
            let m = read_mask(p)?;
            same_grid(&v.meta, &m.meta, p)?;
            Ok(v.masked(&m))
        }
        None => Ok(v),
    }
}

fn magnitude_or_mask(magnitude: &Option<PathBuf>, mask: &Mask) -> Result<RealVolume> {
    match magnitude {
        Some(p) => {
            let m = read(p)?;
            same_grid(&mask.meta, &m.meta, p)?;
            Ok(m)
        }
        None => Ok(mask.to_volume()),
    }
}

fn triple<T: Copy>(v: &[T]) -> [T; 3] {
    [v[0], v[1], v[2]]
}

pub fn phantom(a: PhantomArgs) -> Result<()> {
    let (chi, mask) = match &a.spec {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| input(format!("{}: {e}", path.display())))?;
            let spec = at(path, parse_phantom_spec(&text))?;
            (make_phantom(&spec)?, spec.mask()?)
        }
        None => {
            let meta = VolumeMeta::new(triple(&a.dims), triple(&a.voxel_size), triple(&a.b0))?;
            let p = random_piecewise(meta, a.blobs, [a.chi_range[0], a.chi_range[1]], a.seed)?;
            debug_assert_eq!(p.mask, head_mask(&meta)?);
            (p.chi, p.mask)
        }
    };
    write(&chi, &a.out)?;
    if let Some(p) = &a.mask_out {
        write(&mask.to_volume(), p)?;
    }
    Ok(())
}

pub fn forward(a: ForwardArgs) -> Result<()> {
    if !(a.noise.is_finite() && a.noise >= 0.0) {
        return Err(input(format!("--noise must be >= 0, got {}", a.noise)));
    }
    let chi = read(&a.chi)?;
    let kernel = build_dipole(chi.meta)?;
    let mut field = forward_field(&chi, &kernel)?;
    let sigma = a.noise * field.max_abs();
    add_noise(&mut field, sigma, a.seed)?;
    write(&maybe_masked(field, &a.mask)?, &a.out)
}

pub fn naive(a: NaiveArgs) -> Result<()> {
    let b = read(&a.field)?;
    let chi = naive_inverse(&b, &build_dipole(b.meta)?, a.eps)?;
    write(&maybe_masked(chi, &a.mask)?, &a.out)
}

pub fn tkd(a: TkdArgs) -> Result<()> {
    let b = read(&a.field)?;
    let chi = tkd_invert(&b, &build_dipole(b.meta)?, TkdParams { a: a.a })?;
    write(&maybe_masked(chi, &a.mask)?, &a.out)
}

pub fn medi(a: MediArgs) -> Result<()> {
    let b = read(&a.field)?;
    let mask = read_mask(&a.mask)?;
    same_grid(&b.meta, &mask.meta, &a.mask)?;
    let magnitude = magnitude_or_mask(&a.magnitude, &mask)?;
    let p = MediParams {
        lambda: a.lambda,
        edge_fraction: a.edge_fraction,
        iters: a.iters,
        step: a.step,
    };
    p.validate()?;
    let weights = build_medi_weights(&magnitude, &mask, a.edge_fraction)?;
    let r = medi_invert(&b.masked(&mask), &build_dipole(b.meta)?, &weights, p)?;
    if let Some(path) = &a.trace {
        let mut s = String::from(TraceRow::CSV_HEADER);
        s.push('\n');
        for row in &r.trace {
            let _ = writeln!(s, "{}", row.csv_row());
        }
        write_text(path, &s)?;
    }
    write(&r.chi.masked(&mask), &a.out)
}

pub fn cgls(a: CglsArgs) -> Result<()> {
    let b = read(&a.field)?;
    let w = match &a.weight {
        Some(p) => {
            let w = read(p)?;
            same_grid(&b.meta, &w.meta, p)?;
            Some(w)
        }
        None => None,
    };
    let r = cg_least_squares(&b, &build_dipole(b.meta)?, w.as_ref(), a.iters, a.tol)?;
    info!(
        "{} iterations, final residual {:e}",
        r.residuals.len() - 1,
        r.residuals.last().unwrap_or(&0.0)
    );
    write(&maybe_masked(r.chi, &a.mask)?, &a.out)
}

fn train_config(f: &TrainFlags) -> Result<TrainConfig> {
    let mut c = TrainConfig::default();
    if let Some(path) = &f.config {
        let kv = at(path, read_key_values(path))?;
        at(path, c.apply(&kv))?;
    }
    macro_rules! set {
        ($flag:ident => $($field:tt)+) => {
            if let Some(v) = f.$flag.clone() {
                c.$($field)+ = v;
            }
        };
    }
    set!(epochs => epochs);
    set!(patches_per_epoch => patches_per_epoch);
    set!(patch_size => patch_size);
    set!(batch_size => batch_size);
    set!(lr => lr);
    set!(beta1 => beta1);
    set!(beta2 => beta2);
    set!(gamma => weights.gamma);
    set!(eta => weights.eta);
    set!(rho => weights.rho);
    set!(mask_losses => loss.mask_losses);
    set!(seed => seed);
    set!(d_steps_per_g_step => d_steps_per_g_step);
    set!(adversarial => adversarial);
    set!(augment => augment);
    set!(depth => generator.depth);
    set!(base_channels => generator.base_channels);
    set!(d_layers => discriminator.n_layers);
    set!(d_base_channels => discriminator.base_channels);
    set!(dip_lambda => dip_lambda);
    if let Some(s) = f.infer_stride {
        c.infer_stride = Some(s);
    }
    if let Some(n) = &f.norm {
        c.loss.norm = n
            .parse()
            .map_err(|e: QsmError| input(format!("--norm: {e}")))?;
    }
    if let Some(d) = &f.checkpoint_dir {
        c.checkpoint_dir = Some(d.clone());
    }
    c.validate()?;
    Ok(c)
}

fn field_cases(c: &FieldCases) -> Result<Vec<SimulatedCase>> {
    if c.fields.len() != c.masks.len() {
        return Err(input(format!(
            "{} --field but {} --mask; give one mask per field",
            c.fields.len(),
            c.masks.len()
        )));
    }
    if !c.magnitudes.is_empty() && c.magnitudes.len() != c.fields.len() {
        return Err(input(
            "--magnitude must be given once per --field or not at all",
        ));
    }
    (0..c.fields.len())
        .map(|i| {
            let field = read(&c.fields[i])?;
            let mask = read_mask(&c.masks[i])?;
            same_grid(&field.meta, &mask.meta, &c.masks[i])?;
            let magnitude = magnitude_or_mask(&c.magnitudes.get(i).cloned(), &mask)?;
            Ok(SimulatedCase {
                chi: RealVolume::zeros(field.meta),
                field,
                magnitude,
                mask,
                noise_sigma: 0.0,
            })
        })
        .collect()
}

fn halted(why: String) -> CliError {
    CliError::Numerical(format!("training halted at {why}"))
}

pub fn train(a: TrainArgs) -> Result<()> {
    let cfg = train_config(&a.settings)?;
    if a.chis.len() != a.chi_masks.len() {
        return Err(input(format!(
            "{} --chi but {} --chi-mask",
            a.chis.len(),
            a.chi_masks.len()
        )));
    }
    let chi_volumes = a
        .chis
        .iter()
        .zip(&a.chi_masks)
        .map(|(c, m)| {
            let chi = read(c)?;
            let mask = read_mask(m)?;
            same_grid(&chi.meta, &mask.meta, m)?;
            Ok(ChiLabel { chi, mask })
        })
        .collect::<Result<_>>()?;
    let ds = UnpairedDataset {
        field_cases: field_cases(&a.cases)?,
        chi_volumes,
    };
    let mut g = Generator::<f32>::new(cfg.generator, cfg.seed)?;
    let mut d = Discriminator::<f32>::new(cfg.discriminator, cfg.seed.wrapping_add(1))?;
    let out = train_cycleqsm(&ds, &mut g, &mut d, &cfg)?;
    if let Some(p) = &a.log {
        at(p, out.log.write_csv(p))?;
    }
    at(&a.out, save_generator(&a.out, &g))?;
    if let Some(p) = &a.disc_out {
        at(p, save_discriminator(p, &d))?;
    }
    match out.halted {
        Some(why) => Err(halted(why)),
        None => Ok(()),
    }
}

pub fn uqsm(a: UqsmArgs) -> Result<()> {
    let cfg = train_config(&a.settings)?;
    let ds = UnpairedDataset {
        field_cases: field_cases(&a.cases)?,
        chi_volumes: Vec::new(),
    };
    let mut g = Generator::<f32>::new(cfg.generator, cfg.seed)?;
    let out = train_uqsm(&ds, &mut g, &cfg)?;
    if let Some(p) = &a.log {
        write_text(p, &trace_csv(&out.trace))?;
    }
    at(&a.out, save_generator(&a.out, &g))?;
    match out.halted {
        Some(why) => Err(halted(why)),
        None => Ok(()),
    }
}

pub fn infer(a: InferArgs, threads: usize) -> Result<()> {
    let g = at(&a.generator, load_generator(&a.generator))?;
    let field = read(&a.field)?;
    let mask = read_mask(&a.mask)?;
    same_grid(&field.meta, &mask.meta, &a.mask)?;
    let magnitude = magnitude_or_mask(&a.magnitude, &mask)?;
    let blend: Blend = a
        .blend
        .parse()
        .map_err(|e: QsmError| input(format!("--blend: {e}")))?;
    let cfg = InferConfig {
        patch: a.patch,
        stride: a.stride.unwrap_or((a.patch / 2).max(1)),
        blend,
        threads,
    };
    let chi = infer_stitched(&g, &field, &magnitude, &mask, &cfg)?;
    write(&chi, &a.out)
}

pub fn dip(a: DipArgs) -> Result<()> {
    let field = read(&a.field)?;
    let mask = read_mask(&a.mask)?;
    same_grid(&field.meta, &mask.meta, &a.mask)?;
    let magnitude = magnitude_or_mask(&a.magnitude, &mask)?;
    let cfg = DipConfig {
        lambda: a.lambda,
        iters: a.iters,
        lr: a.lr,
        seed: a.seed,
        generator: GeneratorConfig {
            depth: a.depth,
            base_channels: a.base_channels,
            in_channels: 1,
            zero_final: false,
        },
        noise_scale: a.noise_scale,
    };
    let kernel = build_dipole(field.meta)?;
    let r = optimize_dip::<f32>(&field.masked(&mask), &magnitude, &mask, &kernel, &cfg)?;
    info!("best objective at iteration {}", r.best_iteration);
    if let Some(p) = &a.trace {
        write_text(p, &trace_csv(&r.trace))?;
    }
    write(&r.chi, &a.out)
}

fn parse_roi(s: &str) -> Result<(String, Mask)> {
    let (name, path) = s
        .split_once('=')
        .ok_or_else(|| input(format!("--roi expects NAME=FILE, got {s:?}")))?;
    Ok((name.to_string(), read_mask(Path::new(path))?))
}

pub fn eval(a: EvalArgs) -> Result<()> {
    let truth = read(&a.truth)?;
    let recon = read(&a.recon)?;
    let mask = read_mask(&a.mask)?;
    same_grid(&truth.meta, &recon.meta, &a.recon)?;
    same_grid(&truth.meta, &mask.meta, &a.mask)?;
    let ssim_p = SsimParams {
        window: a.ssim_window,
        ..SsimParams::default()
    };
    let mut header = String::from("rmse_percent,psnr_db,ssim");
    let mut row = format!(
        "{},{},{}",
        rmse(&truth, &recon, &mask)?,
        psnr(&truth, &recon, Some(&mask), None)?,
        ssim3(&truth, &recon, Some(&mask), ssim_p)?
    );
    if !a.rois.is_empty() {
        let mode = match a.regression.as_str() {
            "pooled" => RegressionMode::Pooled,
            "means" => RegressionMode::Means,
            other => {
                return Err(input(format!(
                    "--regression expects pooled or means, got {other:?}"
                )))
            }
        };
        let rois = RoiSet::new(a.rois.iter().map(|s| parse_roi(s)).collect::<Result<_>>()?)?;
        let r = roi_regression(&truth, &recon, &rois, mode)?;
        header.push_str(",slope,intercept,r_squared,corr,mean_abs_error,std_abs_error,points");
        let _ = write!(
            row,
            ",{},{},{},{},{},{},{}",
            r.slope, r.intercept, r.r_squared, r.corr, r.mean_abs_error, r.std_abs_error, r.points
        );
    }
    let text = format!("{header}\n{row}\n");
    match &a.out {
        Some(p) => write_text(p, &text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

pub fn gradcheck(a: GradcheckArgs) -> Result<()> {
    if a.cases == 0 {
        return Err(input("--cases must be positive"));
    }
    let reports = run_all(a.cases, a.seed)?;
    println!("probe,cases,max_rel_f64,max_rel_f32,pass");
    let mut worst = [0.0f64; 2];
    let mut failed = Vec::new();
    for r in &reports {
        println!(
            "{},{},{:.3e},{:.3e},{}",
            r.probe.name(),
            r.cases,
            r.max_rel_f64,
            r.max_rel_f32,
            r.passed()
        );
        worst[0] = worst[0].max(r.max_rel_f64);
        worst[1] = worst[1].max(r.max_rel_f32);
        if !r.passed() {
            failed.push(r.probe.name());
        }
    }
    println!(
        "max relative error {:.3e} double (limit {TOL_F64:e}), {:.3e} single (limit {TOL_F32:e})",
        worst[0], worst[1]
    );
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Numerical(format!(
            "gradient check failed for {}",
            failed.join(", ")
        )))
    }
}
