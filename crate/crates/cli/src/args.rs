use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(
    name = "qsm",
    version,
    about = "Susceptibility mapping from local field maps"
)]
pub struct Cli {
    /// Worker threads for patch inference and other parallel sections.
    #[arg(long, global = true, default_value_t = 1)]
    pub threads: usize,

    /// Log progress to stderr.
    #[arg(short, long, global = true)]
    pub verbose: bool,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build a susceptibility phantom from a shape file or random ellipsoids.
    Phantom(PhantomArgs),
    /// Simulate the local field of a susceptibility map, optionally with noise.
    Forward(ForwardArgs),
    /// Regularized direct k-space division.
    Naive(NaiveArgs),
    /// Thresholded k-space division.
    Tkd(TkdArgs),
    /// Edge-weighted TV-regularized inversion.
    Medi(MediArgs),
    /// Weighted least squares by conjugate gradients.
    Cgls(CglsArgs),
    /// Train the generator with the unpaired cycle-consistent adversarial objective.
    Train(TrainArgs),
    /// Reconstruct a full volume with a trained generator by stitched patches.
    Infer(InferArgs),
    /// Per-volume deep image prior reconstruction.
    Dip(DipArgs),
    /// Unsupervised training on field maps with the phasor loss.
    Uqsm(UqsmArgs),
    /// Compare a reconstruction with ground truth.
    Eval(EvalArgs),
    /// Finite-difference check of every differentiable operation and loss.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
pub struct PhantomArgs {
    /// Shape file (key = value lines: dims, voxel_size, b0_dir, background_chi, seed, sphere, box).
    /// Without it, random ellipsoids are placed in an ellipsoidal head.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    /// Grid size for random phantoms.
    #[arg(long, num_args = 3, value_names = ["NX", "NY", "NZ"], default_values_t = [64, 64, 64])]
    pub dims: Vec<usize>,
    /// Voxel size in mm for random phantoms.
    #[arg(long, num_args = 3, value_names = ["SX", "SY", "SZ"], default_values_t = [1.0, 1.0, 1.0])]
    pub voxel_size: Vec<f64>,
    /// Unit B0 direction for random phantoms.
    #[arg(long, num_args = 3, value_names = ["BX", "BY", "BZ"], allow_negative_numbers = true, default_values_t = [0.0, 0.0, 1.0])]
    pub b0: Vec<f64>,
    /// Number of random ellipsoids.
    #[arg(long, default_value_t = 8)]
    pub blobs: usize,
    /// Susceptibility range of random ellipsoids in ppm.
    #[arg(long, num_args = 2, value_names = ["MIN", "MAX"], allow_negative_numbers = true, default_values_t = [-0.2, 0.2])]
    pub chi_range: Vec<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    /// Also write the brain mask (shape union for shape files, head ellipsoid otherwise).
    #[arg(long)]
    pub mask_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ForwardArgs {
    #[arg(long)]
    pub chi: PathBuf,
    /// Gaussian noise standard deviation as a fraction of the peak absolute field.
    #[arg(long, default_value_t = 0.0)]
    pub noise: f64,
    /// Multiply the output by this mask.
    #[arg(long)]
    pub mask: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct NaiveArgs {
    #[arg(long)]
    pub field: PathBuf,
    /// Regularizer in conj(d) / (d^2 + eps).
    #[arg(long, default_value_t = qsm_core::dipole::DEFAULT_NAIVE_EPS)]
    pub eps: f64,
    #[arg(long)]
    pub mask: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TkdArgs {
    #[arg(long)]
    pub field: PathBuf,
    /// Kernel threshold: |d| below it is replaced by sign(d) * a.
    #[arg(long, default_value_t = 0.1)]
    pub a: f64,
    #[arg(long)]
    pub mask: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct MediArgs {
    #[arg(long)]
    pub field: PathBuf,
    #[arg(long)]
    pub mask: PathBuf,
    /// Magnitude image for data weights and edges; the mask is used when absent.
    #[arg(long)]
    pub magnitude: Option<PathBuf>,
    /// TV weight. The default suits fields in radians; fields in ppm want about 1e-4.
    #[arg(long, default_value_t = 600.0)]
    pub lambda: f64,
    /// Fraction of mask voxels treated as edges (not regularized).
    #[arg(long, default_value_t = 0.3)]
    pub edge_fraction: f64,
    #[arg(long, default_value_t = 300)]
    pub iters: usize,
    /// Initial trial step for the line search.
    #[arg(long, default_value_t = 1.0)]
    pub step: f64,
    /// Objective trace as CSV.
    #[arg(long)]
    pub trace: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct CglsArgs {
    #[arg(long)]
    pub field: PathBuf,
    /// Data weights (e.g. the mask); unweighted when absent.
    #[arg(long)]
    pub weight: Option<PathBuf>,
    #[arg(long, default_value_t = 100)]
    pub iters: usize,
    /// Relative normal-residual tolerance.
    #[arg(long, default_value_t = 1e-10)]
    pub tol: f64,
    #[arg(long)]
    pub mask: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

/// Training data: repeat `--field` and `--mask` per case; `--magnitude` is optional but, when
/// used, given once per case.
#[derive(Debug, Args)]
pub struct FieldCases {
    #[arg(long = "field", required = true)]
    pub fields: Vec<PathBuf>,
    #[arg(long = "mask", required = true)]
    pub masks: Vec<PathBuf>,
    #[arg(long = "magnitude")]
    pub magnitudes: Vec<PathBuf>,
}

/// Training settings. Precedence: these flags, then `--config`, then built-in defaults.
#[derive(Debug, Args)]
pub struct TrainFlags {
    /// key = value file with any of the settings below (names use underscores).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// [default: 50]
    #[arg(long)]
    pub epochs: Option<usize>,
    /// [default: 256]
    #[arg(long)]
    pub patches_per_epoch: Option<usize>,
    /// Cubic patch edge [default: 16]
    #[arg(long)]
    pub patch_size: Option<usize>,
    /// Stitching stride [default: patch_size / 2]
    #[arg(long)]
    pub infer_stride: Option<usize>,
    /// [default: 1]
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Adam learning rate for both networks [default: 1e-5]
    #[arg(long)]
    pub lr: Option<f64>,
    /// [default: 0.5]
    #[arg(long)]
    pub beta1: Option<f64>,
    /// [default: 0.999]
    #[arg(long)]
    pub beta2: Option<f64>,
    /// Cycle-consistency weight [default: 10]
    #[arg(long)]
    pub gamma: Option<f64>,
    /// Gradient-difference weight [default: 1]
    #[arg(long)]
    pub eta: Option<f64>,
    /// TV weight [default: 0.1]
    #[arg(long)]
    pub rho: Option<f64>,
    /// l1 or l2 (squared) for cycle, gradient and TV terms [default: l1]
    #[arg(long)]
    pub norm: Option<String>,
    /// Restrict cycle, gradient and TV terms to the mask [default: false]
    #[arg(long)]
    pub mask_losses: Option<bool>,
    /// [default: 0]
    #[arg(long)]
    pub seed: Option<u64>,
    /// Discriminator updates per generator update [default: 1]
    #[arg(long)]
    pub d_steps_per_g_step: Option<usize>,
    /// Use the discriminator [default: true]
    #[arg(long)]
    pub adversarial: Option<bool>,
    /// Random flips and rotations about B0 [default: true]
    #[arg(long)]
    pub augment: Option<bool>,
    /// U-Net levels [default: 3]
    #[arg(long)]
    pub depth: Option<usize>,
    /// U-Net channels at full resolution [default: 16]
    #[arg(long)]
    pub base_channels: Option<usize>,
    /// Strided discriminator layers [default: 3]
    #[arg(long)]
    pub d_layers: Option<usize>,
    /// Discriminator channels in the first layer [default: 16]
    #[arg(long)]
    pub d_base_channels: Option<usize>,
    /// TV weight of the phasor loss (uqsm) [default: 1e-3]
    #[arg(long)]
    pub dip_lambda: Option<f64>,
    /// Directory for per-epoch checkpoints.
    #[arg(long)]
    pub checkpoint_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub cases: FieldCases,
    /// Susceptibility labels, unrelated to the field cases; repeat per label.
    #[arg(long = "chi", required = true)]
    pub chis: Vec<PathBuf>,
    /// One mask per `--chi`.
    #[arg(long = "chi-mask", required = true)]
    pub chi_masks: Vec<PathBuf>,
    #[command(flatten)]
    pub settings: TrainFlags,
    /// Trained generator checkpoint.
    #[arg(long)]
    pub out: PathBuf,
    /// Trained discriminator checkpoint.
    #[arg(long)]
    pub disc_out: Option<PathBuf>,
    /// Per-step losses as CSV.
    #[arg(long)]
    pub log: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct UqsmArgs {
    #[command(flatten)]
    pub cases: FieldCases,
    #[command(flatten)]
    pub settings: TrainFlags,
    #[arg(long)]
    pub out: PathBuf,
    /// Per-step losses as CSV.
    #[arg(long)]
    pub log: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    /// Generator checkpoint.
    #[arg(long)]
    pub generator: PathBuf,
    #[arg(long)]
    pub field: PathBuf,
    #[arg(long)]
    pub mask: PathBuf,
    /// The mask is used when absent.
    #[arg(long)]
    pub magnitude: Option<PathBuf>,
    #[arg(long, default_value_t = 16)]
    pub patch: usize,
    /// [default: patch / 2]
    #[arg(long)]
    pub stride: Option<usize>,
    /// uniform or cosine
    #[arg(long, default_value = "uniform")]
    pub blend: String,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct DipArgs {
    #[arg(long)]
    pub field: PathBuf,
    #[arg(long)]
    pub mask: PathBuf,
    #[arg(long)]
    pub magnitude: Option<PathBuf>,
    /// TV weight of the phasor loss.
    #[arg(long, default_value_t = qsm_core::losses::DEFAULT_DIP_LAMBDA)]
    pub lambda: f64,
    #[arg(long, default_value_t = 500)]
    pub iters: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    /// U-Net levels; volume dimensions must be divisible by 2^(depth-1).
    #[arg(long, default_value_t = 3)]
    pub depth: usize,
    /// Half the trained generator's width.
    #[arg(long, default_value_t = 8)]
    pub base_channels: usize,
    /// The fixed input is uniform on [0, noise_scale).
    #[arg(long, default_value_t = 0.1)]
    pub noise_scale: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Loss trace as CSV.
    #[arg(long)]
    pub trace: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub truth: PathBuf,
    #[arg(long)]
    pub recon: PathBuf,
    #[arg(long)]
    pub mask: PathBuf,
    /// Region for regression as NAME=MASK.dbv; repeat per region.
    #[arg(long = "roi")]
    pub rois: Vec<String>,
    /// pooled (every ROI voxel) or means (one point per ROI).
    #[arg(long, default_value = "pooled")]
    pub regression: String,
    /// SSIM window edge in voxels.
    #[arg(long, default_value_t = 7)]
    pub ssim_window: usize,
    /// CSV destination; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Random cases per operation.
    #[arg(long, default_value_t = 20)]
    pub cases: usize,
}
