use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use vseg_core::deformation::{DeformationParams, NoiseKind};
use vseg_core::frangi::VesselnessParams;
use vseg_core::losses::{ConsistencyCriterion, ConsistencyKind, FocalTverskyParams};
use vseg_core::optim::AdamParams;
use vseg_core::patches::PatchSpec;
use vseg_core::phantom::PhantomConfig;
use vseg_core::trainer::TrainRunConfig;
use vseg_core::unet::{NetworkConfig, Normalization};
use vseg_core::volume::Axis;

use crate::values::{List, Pair, Switch, Triple};

fn phantom() -> PhantomConfig {
    PhantomConfig::default()
}

fn run() -> TrainRunConfig {
    TrainRunConfig::default()
}

fn net() -> NetworkConfig {
    NetworkConfig::default()
}

fn ft() -> FocalTverskyParams {
    FocalTverskyParams::default()
}

fn adam() -> AdamParams {
    AdamParams::default()
}

fn deform() -> DeformationParams {
    DeformationParams::default()
}

fn frangi() -> VesselnessParams {
    VesselnessParams::default()
}

fn patch() -> PatchSpec {
    PatchSpec::default()
}

/// Small-vessel segmentation with deformation-aware training.
#[derive(Debug, Parser)]
#[command(name = "vseg", version, propagate_version = true, args_override_self = true)]
pub struct Cli {
    /// Configuration file: TOML, or the manifest.json of an earlier run
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,

    /// Worker threads; 0 uses every core, 1 runs fully deterministically
    #[arg(long, global = true, default_value_t = 0)]
    pub threads: usize,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic vessel dataset split into train/val/test
    Phantom(PhantomArgs),
    /// Train the network on a dataset written by `phantom`
    Train(TrainArgs),
    /// Segment volumes with a trained checkpoint
    Predict(PredictArgs),
    /// Dice/IoU of predicted masks against reference labels
    Evaluate(EvaluateArgs),
    /// Sample an elastic deformation field and optionally apply it
    Deform(DeformArgs),
    /// Multiscale Hessian vesselness baseline
    Frangi(FrangiArgs),
    /// Maximum-intensity projection of a volume to PNG
    Mip(MipArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Phantom(_) => "phantom",
            Command::Train(_) => "train",
            Command::Predict(_) => "predict",
            Command::Evaluate(_) => "evaluate",
            Command::Deform(_) => "deform",
            Command::Frangi(_) => "frangi",
            Command::Mip(_) => "mip",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum AxisArg {
    X,
    Y,
    Z,
}

impl From<AxisArg> for Axis {
    fn from(a: AxisArg) -> Axis {
        match a {
            AxisArg::X => Axis::X,
            AxisArg::Y => Axis::Y,
            AxisArg::Z => Axis::Z,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum NormArg {
    None,
    Batch,
}

impl From<Normalization> for NormArg {
    fn from(n: Normalization) -> Self {
        match n {
            Normalization::None => NormArg::None,
            Normalization::Batch => NormArg::Batch,
        }
    }
}

impl From<NormArg> for Normalization {
    fn from(n: NormArg) -> Self {
        match n {
            NormArg::None => Normalization::None,
            NormArg::Batch => Normalization::Batch,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum CriterionArg {
    /// Mean squared difference of probabilities
    Mse,
    /// Focal-Tversky against the warped prediction as a soft target
    FocalTverskySoft,
}

impl From<ConsistencyKind> for CriterionArg {
    fn from(k: ConsistencyKind) -> Self {
        match k {
            ConsistencyKind::MeanSquared => CriterionArg::Mse,
            ConsistencyKind::FocalTverskySoft => CriterionArg::FocalTverskySoft,
        }
    }
}

impl From<CriterionArg> for ConsistencyKind {
    fn from(k: CriterionArg) -> Self {
        match k {
            CriterionArg::Mse => ConsistencyKind::MeanSquared,
            CriterionArg::FocalTverskySoft => ConsistencyKind::FocalTverskySoft,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum NoiseArg {
    Uniform,
    Gaussian,
}

impl From<NoiseKind> for NoiseArg {
    fn from(k: NoiseKind) -> Self {
        match k {
            NoiseKind::Uniform => NoiseArg::Uniform,
            NoiseKind::Gaussian => NoiseArg::Gaussian,
        }
    }
}

impl From<NoiseArg> for NoiseKind {
    fn from(k: NoiseArg) -> Self {
        match k {
            NoiseArg::Uniform => NoiseKind::Uniform,
            NoiseArg::Gaussian => NoiseKind::Gaussian,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FieldFormat {
    Nifti,
    /// Little-endian samples with a JSON sidecar
    Raw,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Precision {
    F32,
    F64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum LabelSet {
    /// Corrupted labels (with gaps)
    Noisy,
    /// Exact labels
    Clean,
}

#[derive(Debug, Args)]
pub struct PhantomArgs {
    /// Number of volumes, split 6:2:3
    #[arg(long, default_value_t = 11)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    /// Volume size in voxels
    #[arg(long, default_value_t = Triple(phantom().dims))]
    pub dims: Triple<usize>,
    /// Voxel spacing in mm
    #[arg(long, default_value_t = Triple(phantom().spacing))]
    pub spacing: Triple<f32>,
    /// Inclusive range of vessels per volume
    #[arg(long, default_value_t = Pair(phantom().vessel_count.0, phantom().vessel_count.1))]
    pub vessels: Pair<usize>,
    /// Vessel radius range in voxels
    #[arg(long, default_value_t = Pair(phantom().radius_range.0, phantom().radius_range.1))]
    pub radius: Pair<f64>,
    /// Spline waypoints per vessel
    #[arg(long, default_value_t = phantom().waypoints)]
    pub waypoints: usize,
    #[arg(long, default_value_t = phantom().vessel_intensity)]
    pub vessel_intensity: f32,
    #[arg(long, default_value_t = phantom().background_intensity)]
    pub background_intensity: f32,
    /// Standard deviation of additive Gaussian noise
    #[arg(long, default_value_t = phantom().noise_sigma)]
    pub noise_sigma: f64,
    /// Point-spread blur in voxels; 0 disables it
    #[arg(long, default_value_t = phantom().blur_sigma)]
    pub blur_sigma: f64,
    /// Chance that a centerline segment gets a gap in the noisy labels
    #[arg(long, default_value_t = phantom().gap_probability)]
    pub gap_probability: f64,
    /// Arclength of one corruption segment
    #[arg(long, default_value_t = phantom().gap_segment_length)]
    pub gap_segment_length: f64,
    /// Arclength removed by one gap
    #[arg(long, default_value_t = phantom().gap_length)]
    pub gap_length: f64,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset directory written by `phantom`
    #[arg(long, value_name = "DIR")]
    pub data: PathBuf,
    /// Run directory for checkpoints, logs and test predictions
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    #[arg(long, default_value_t = run().epochs)]
    pub epochs: usize,
    #[arg(long, default_value_t = run().batch_size)]
    pub batch_size: usize,
    #[arg(long, default_value_t = run().patches_per_epoch)]
    pub patches_per_epoch: usize,
    #[arg(long, default_value_t = run().seed)]
    pub seed: u64,
    /// Deformation consistency loss between the two branches
    #[arg(long, default_value_t = Switch(run().consistency))]
    pub consistency: Switch,
    /// Supervise the deformed branch too
    #[arg(long, default_value_t = Switch(run().branch2_supervision))]
    pub branch2_supervision: Switch,
    /// Number of supervised decoder scales (1 = plain U-Net)
    #[arg(long, default_value_t = net().supervision_scales)]
    pub mss: usize,
    /// Per-scale loss weights, finest first [default: 1,0.75,0.5 for 3 scales]
    #[arg(long)]
    pub mss_weights: Option<List>,
    /// Resolution levels
    #[arg(long, default_value_t = net().depth)]
    pub depth: usize,
    #[arg(long, default_value_t = net().base_channels)]
    pub base_channels: usize,
    #[arg(long, value_enum, default_value_t = NormArg::from(net().normalization))]
    pub normalization: NormArg,
    #[arg(long, default_value_t = Triple(patch().patch_size))]
    pub patch_size: Triple<usize>,
    #[arg(long, default_value_t = Triple(patch().stride))]
    pub stride: Triple<usize>,
    /// Adam learning rate
    #[arg(long, default_value_t = adam().lr)]
    pub lr: f64,
    #[arg(long, default_value_t = adam().beta1)]
    pub adam_beta1: f64,
    #[arg(long, default_value_t = adam().beta2)]
    pub adam_beta2: f64,
    #[arg(long, default_value_t = adam().eps)]
    pub adam_eps: f64,
    /// Focal-Tversky false-negative weight
    #[arg(long, default_value_t = ft().alpha)]
    pub ft_alpha: f64,
    /// Focal-Tversky false-positive weight
    #[arg(long, default_value_t = ft().beta)]
    pub ft_beta: f64,
    /// Focal-Tversky exponent; the loss is (1 - TI)^(1/gamma)
    #[arg(long, default_value_t = ft().gamma)]
    pub ft_gamma: f64,
    #[arg(long, default_value_t = ft().epsilon)]
    pub ft_epsilon: f64,
    #[arg(long, value_enum, default_value_t = CriterionArg::from(ConsistencyCriterion::default().kind))]
    pub consistency_criterion: CriterionArg,
    #[arg(long, default_value_t = ConsistencyCriterion::default().weight)]
    pub consistency_weight: f64,
    /// Range of the per-slice displacement scale
    #[arg(long, default_value_t = Pair(deform().scale_range.0, deform().scale_range.1))]
    pub deform_scale: Pair<f64>,
    #[arg(long, default_value_t = deform().kernel_size)]
    pub deform_kernel_size: usize,
    #[arg(long, default_value_t = deform().kernel_sigma)]
    pub deform_kernel_sigma: f64,
    #[arg(long, value_enum, default_value_t = NoiseArg::from(deform().noise))]
    pub deform_noise: NoiseArg,
    /// One displacement map for every slice
    #[arg(long, default_value_t = Switch(deform().shared_across_slices))]
    pub deform_shared: Switch,
    /// Epochs between checkpoints
    #[arg(long, default_value_t = run().checkpoint_every)]
    pub checkpoint_every: usize,
    /// Batches prepared ahead of the optimizer
    #[arg(long, default_value_t = run().prefetch)]
    pub prefetch: usize,
    /// Foreground threshold for validation and test masks
    #[arg(long, default_value_t = run().threshold)]
    pub threshold: f32,
    /// Labels used for training and validation
    #[arg(long, value_enum, default_value_t = LabelSet::Noisy)]
    pub labels: LabelSet,
    #[arg(long, value_enum, default_value_t = Precision::F32)]
    pub precision: Precision,
    /// Continue from a checkpoint
    #[arg(long, value_name = "CKPT")]
    pub resume: Option<PathBuf>,
    /// Segment the test split with the best checkpoint afterwards
    #[arg(long, default_value_t = Switch(true))]
    pub predict_test: Switch,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long, value_name = "CKPT")]
    pub checkpoint: PathBuf,
    /// A NIfTI volume or a directory of them
    #[arg(long, value_name = "PATH")]
    pub input: PathBuf,
    /// Writes probabilities/, masks/ and overlays/ here
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    #[arg(long, default_value_t = run().threshold)]
    pub threshold: f32,
    #[arg(long, default_value_t = Triple(patch().patch_size))]
    pub patch_size: Triple<usize>,
    #[arg(long, default_value_t = Triple(patch().stride))]
    pub stride: Triple<usize>,
    /// Projection axis of the overlay
    #[arg(long, value_enum, default_value_t = AxisArg::Z)]
    pub axis: AxisArg,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Predicted mask, or a directory matched to --ref by file name
    #[arg(long, value_name = "PATH")]
    pub pred: PathBuf,
    /// Reference label, or a directory
    #[arg(long = "ref", value_name = "PATH")]
    pub reference: PathBuf,
    #[arg(long, value_name = "DIR", default_value = "evaluation")]
    pub out: PathBuf,
    /// Row label in the report
    #[arg(long, default_value = "model")]
    pub method: String,
    /// Predictions at or above this value count as foreground
    #[arg(long, default_value_t = run().threshold)]
    pub threshold: f32,
    /// Images for difference overlays (matched by file name)
    #[arg(long, value_name = "PATH")]
    pub images: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = AxisArg::Z)]
    pub axis: AxisArg,
}

#[derive(Debug, Args)]
pub struct DeformArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Field size; ignored when --input is given
    #[arg(long, default_value_t = Triple(patch().patch_size))]
    pub dims: Triple<usize>,
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    /// Volume to warp with the sampled field
    #[arg(long, value_name = "PATH")]
    pub input: Option<PathBuf>,
    #[arg(long, default_value_t = Pair(deform().scale_range.0, deform().scale_range.1))]
    pub scale: Pair<f64>,
    #[arg(long, default_value_t = deform().kernel_size)]
    pub kernel_size: usize,
    #[arg(long, default_value_t = deform().kernel_sigma)]
    pub kernel_sigma: f64,
    #[arg(long, value_enum, default_value_t = NoiseArg::from(deform().noise))]
    pub noise: NoiseArg,
    #[arg(long, default_value_t = Switch(deform().shared_across_slices))]
    pub shared: Switch,
    /// File format of the dx/dy displacement maps
    #[arg(long, value_enum, default_value_t = FieldFormat::Nifti)]
    pub format: FieldFormat,
    #[arg(long, value_enum, default_value_t = AxisArg::Z)]
    pub axis: AxisArg,
}

#[derive(Debug, Args)]
pub struct FrangiArgs {
    /// A NIfTI volume or a directory of them
    #[arg(long, value_name = "PATH")]
    pub input: PathBuf,
    /// Writes responses/ and masks/ here
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    /// Gaussian scales in voxels
    #[arg(long, default_value_t = List(frangi().scales))]
    pub scales: List,
    #[arg(long, default_value_t = frangi().alpha)]
    pub alpha: f64,
    #[arg(long, default_value_t = frangi().beta)]
    pub beta: f64,
    /// Structure sensitivity [default: half the largest Hessian norm per scale]
    #[arg(long)]
    pub c: Option<f64>,
    /// Mask threshold as a fraction of the maximum response
    #[arg(long, default_value_t = frangi().threshold)]
    pub threshold: f64,
    #[arg(long, value_enum, default_value_t = AxisArg::Z)]
    pub axis: AxisArg,
}

#[derive(Debug, Args)]
pub struct MipArgs {
    #[arg(long, value_name = "PATH")]
    pub input: PathBuf,
    /// PNG file to write
    #[arg(long, value_name = "PNG")]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t = AxisArg::Z)]
    pub axis: AxisArg,
    /// Intensity window `low,high` [default: the projection's range]
    #[arg(long)]
    pub window: Option<Pair<f64>>,
    /// Mask painted red over the projection
    #[arg(long, value_name = "PATH")]
    pub overlay: Option<PathBuf>,
}
