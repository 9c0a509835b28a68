//! Patch sampling and augmentation, the unpaired cycleGAN loop, per-volume DIP, uQSM training
//! and stitched whole-volume inference.

mod cycle;
mod dip;
mod infer;
mod patches;

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::config::{parse_value, KeyValues};
use crate::error::{QsmError, Result};
use crate::losses::{LossOptions, LossWeights, DEFAULT_DIP_LAMBDA};
use crate::nn::{AdamConfig, DiscriminatorConfig, GeneratorConfig};
use crate::phantom::SimulatedCase;
use crate::volume::{Mask, RealVolume};

pub use cycle::{train_cycleqsm, StepRecord, TrainLog, TrainOutcome};
pub use dip::{
    optimize_dip, trace_csv, train_uqsm, DipConfig, DipResult, DipTraceRow, UqsmOutcome,
};
pub use infer::{coverage_counts, infer_stitched, stitch_with, window_origins, Blend, InferConfig};
pub use patches::{
    augment, draw_patches, extract_patch, sample_patches, Augmentation, PatchDraw, PatchGroup,
    PatchPair,
};

/// A susceptibility map used as an unpaired label, with its brain mask.
#[derive(Debug, Clone)]
pub struct ChiLabel {
    pub chi: RealVolume,
    pub mask: Mask,
}

/// Two independent sample sets: measured fields and susceptibility labels.
/// Nothing pairs an entry of one list with an entry of the other.
#[derive(Debug, Clone, Default)]
pub struct UnpairedDataset {
    pub field_cases: Vec<SimulatedCase>,
    pub chi_volumes: Vec<ChiLabel>,
}

impl UnpairedDataset {
    pub fn validate(&self) -> Result<()> {
        if self.field_cases.is_empty() {
            return Err(QsmError::param("dataset", "no field cases"));
        }
        for c in &self.field_cases {
            c.field.meta.ensure_same(&c.magnitude.meta, "magnitude")?;
            c.field.meta.ensure_same(&c.mask.meta, "mask")?;
        }
        for l in &self.chi_volumes {
            l.chi.meta.ensure_same(&l.mask.meta, "chi mask")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub patches_per_epoch: usize,
    /// Cubic patch edge in voxels.
    pub patch_size: usize,
    /// Stitching stride; `None` means half the patch.
    pub infer_stride: Option<usize>,
    /// Patches per optimizer step.
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weights: LossWeights,
    pub loss: LossOptions,
    pub seed: u64,
    pub d_steps_per_g_step: usize,
    /// Off: no discriminator, the generator sees only the cycle, gradient and TV terms.
    pub adversarial: bool,
    pub augment: bool,
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
    /// TV weight of the phasor loss used by uQSM.
    pub dip_lambda: f64,
    /// Per-epoch checkpoints go here when set.
    pub checkpoint_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let adam = AdamConfig::default();
        Self {
            epochs: 50,
            patches_per_epoch: 256,
            patch_size: 16,
            infer_stride: None,
            batch_size: 1,
            lr: adam.lr,
            beta1: adam.beta1,
            beta2: adam.beta2,
            weights: LossWeights::default(),
            loss: LossOptions::default(),
            seed: 0,
            d_steps_per_g_step: 1,
            adversarial: true,
            augment: true,
            generator: GeneratorConfig::default(),
            discriminator: DiscriminatorConfig::default(),
            dip_lambda: DEFAULT_DIP_LAMBDA,
            checkpoint_dir: None,
        }
    }
}

/// Keys accepted by [`TrainConfig::apply`].
pub const TRAIN_KEYS: [&str; 24] = [
    "epochs",
    "patches_per_epoch",
    "patch_size",
    "infer_stride",
    "batch_size",
    "lr",
    "beta1",
    "beta2",
    "gamma",
    "eta",
    "rho",
    "norm",
    "mask_losses",
    "seed",
    "d_steps_per_g_step",
    "adversarial",
    "augment",
    "depth",
    "base_channels",
    "zero_final",
    "d_layers",
    "d_base_channels",
    "dip_lambda",
    "checkpoint_dir",
];

impl TrainConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            ..AdamConfig::default()
        }
    }

    pub fn patch_dims(&self) -> [usize; 3] {
        [self.patch_size; 3]
    }

    pub fn stride(&self) -> usize {
        self.infer_stride.unwrap_or((self.patch_size / 2).max(1))
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.patches_per_epoch / self.batch_size.max(1)
    }

    pub fn infer(&self) -> InferConfig {
        InferConfig {
            patch: self.patch_size,
            stride: self.stride(),
            ..InferConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(QsmError::param("epochs", "must be positive"));
        }
        if self.batch_size == 0 {
            return Err(QsmError::param("batch_size", "must be positive"));
        }
        if self.steps_per_epoch() == 0 {
            return Err(QsmError::param(
                "patches_per_epoch",
                "must be at least batch_size",
            ));
        }
        if self.d_steps_per_g_step == 0 {
            return Err(QsmError::param("d_steps_per_g_step", "must be positive"));
        }
        let stride = self.stride();
        if stride == 0 || stride > self.patch_size {
            return Err(QsmError::param(
                "infer_stride",
                format!("must be in 1..={}, got {stride}", self.patch_size),
            ));
        }
        if !(self.dip_lambda.is_finite() && self.dip_lambda >= 0.0) {
            return Err(QsmError::param(
                "dip_lambda",
                "must be finite and non-negative",
            ));
        }
        self.adam().validate()?;
        self.weights.validate()?;
        self.generator.validate()?;
        self.generator.check_dims(self.patch_dims())?;
        if self.adversarial {
            self.discriminator.validate()?;
            if self.discriminator.output_dims(self.patch_dims()).is_none() {
                return Err(QsmError::param(
                    "patch_size",
                    format!(
                        "{} is too small for a {}-layer discriminator",
                        self.patch_size, self.discriminator.n_layers
                    ),
                ));
            }
        }
        Ok(())
    }

    /// Overrides fields named in a parsed config file.
    pub fn apply(&mut self, kv: &KeyValues) -> Result<()> {
        kv.ensure_known(&TRAIN_KEYS)?;
        for e in kv.entries() {
            match e.key.as_str() {
                "epochs" => self.epochs = parse_value(e)?,
                "patches_per_epoch" => self.patches_per_epoch = parse_value(e)?,
                "patch_size" => self.patch_size = parse_value(e)?,
                "infer_stride" => self.infer_stride = Some(parse_value(e)?),
                "batch_size" => self.batch_size = parse_value(e)?,
                "lr" => self.lr = parse_value(e)?,
                "beta1" => self.beta1 = parse_value(e)?,
                "beta2" => self.beta2 = parse_value(e)?,
                "gamma" => self.weights.gamma = parse_value(e)?,
                "eta" => self.weights.eta = parse_value(e)?,
                "rho" => self.weights.rho = parse_value(e)?,
                "norm" => self.loss.norm = parse_value(e)?,
                "mask_losses" => self.loss.mask_losses = parse_value(e)?,
                "seed" => self.seed = parse_value(e)?,
                "d_steps_per_g_step" => self.d_steps_per_g_step = parse_value(e)?,
                "adversarial" => self.adversarial = parse_value(e)?,
                "augment" => self.augment = parse_value(e)?,
                "depth" => self.generator.depth = parse_value(e)?,
                "base_channels" => self.generator.base_channels = parse_value(e)?,
                "zero_final" => self.generator.zero_final = parse_value(e)?,
                "d_layers" => self.discriminator.n_layers = parse_value(e)?,
                "d_base_channels" => self.discriminator.base_channels = parse_value(e)?,
                "dip_lambda" => self.dip_lambda = parse_value(e)?,
                "checkpoint_dir" => self.checkpoint_dir = Some(PathBuf::from(&e.value)),
                _ => unreachable!("checked by ensure_known"),
            }
        }
        Ok(())
    }
}
