use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use rmi_core::autodiff::FdPrecision;
use rmi_core::region::PoolMode;

#[derive(Debug, Parser)]
#[command(name = "rmi", version, about = "Region mutual information loss: evaluation, gradcheck, oracles and a toy trainer")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Evaluate the loss on a label file and a probability tensor.
    Loss(LossArgs),
    /// Compare the analytic gradient against central differences.
    Gradcheck(GradcheckArgs),
    /// Check the lower bound against the closed-form Gaussian mutual information.
    Oracle(OracleArgs),
    /// Train the toy conv net on synthetic shapes.
    Train(TrainArgs),
    /// Evaluate a checkpoint (or a fresh model) on a dataset split.
    Eval(EvalArgs),
}

#[derive(Debug, Clone, Args)]
pub struct LossFlags {
    /// Downsampling factor applied before unfolding [default: 4 for `loss`, 2 for `gradcheck`].
    #[arg(long)]
    pub df: Option<usize>,
    /// Downsampling mode.
    #[arg(long, default_value = "avg", value_parser = parse_pool)]
    pub pool: PoolMode,
    /// Side R of the square region; points have R*R coordinates.
    #[arg(long, default_value_t = 3)]
    pub region_side: usize,
    /// Stride between window origins.
    #[arg(long, default_value_t = 1)]
    pub stride: usize,
    /// Diagonal regularizer added to the conditional covariance.
    #[arg(long, default_value_t = 1e-6)]
    pub xi: f64,
    /// Ridge added to the prediction covariance before the solve.
    #[arg(long, default_value_t = rmi_core::rmi::DEFAULT_SIGMA_P_RIDGE)]
    pub sigma_p_ridge: f64,
    /// Weight of the BCE term; RMI gets 1 - lambda.
    #[arg(long, default_value_t = 0.5)]
    pub lambda: f64,
}

#[derive(Debug, Args)]
pub struct LossArgs {
    /// Labels: binary PGM (P5) stack or RMT1 integer tensor [B, H, W].
    #[arg(long)]
    pub labels: PathBuf,
    /// Probabilities: RMT1 tensor [B, C, H, W].
    #[arg(long)]
    pub probs: PathBuf,
    #[command(flatten)]
    pub loss: LossFlags,
    /// Label value excluded from the loss.
    #[arg(long, default_value_t = 255, conflicts_with = "no_ignore")]
    pub ignore_index: u32,
    /// Treat every label value as a class.
    #[arg(long)]
    pub no_ignore: bool,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[command(flatten)]
    pub loss: LossFlags,
    #[arg(long, default_value_t = 2)]
    pub batch: usize,
    #[arg(long, default_value_t = 3)]
    pub classes: usize,
    #[arg(long, default_value_t = 24)]
    pub height: usize,
    #[arg(long, default_value_t = 24)]
    pub width: usize,
    /// Random instances to check.
    #[arg(long, default_value_t = 1)]
    pub instances: usize,
    /// Probed logit coordinates per instance.
    #[arg(long, default_value_t = 50)]
    pub probes: usize,
    /// Central-difference step.
    #[arg(long, default_value_t = 1e-5)]
    pub step: f64,
    /// Maximum accepted relative error.
    #[arg(long, default_value_t = 1e-5)]
    pub threshold: f64,
    /// Arithmetic of the loss evaluations inside the differences: dd or f64.
    #[arg(long, default_value = "dd", value_parser = parse_precision)]
    pub fd_precision: FdPrecision,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct OracleArgs {
    /// Dimensions to check (comma separated).
    #[arg(long = "d", value_delimiter = ',', default_values_t = [2])]
    pub dims: Vec<usize>,
    /// Per-coordinate correlations (comma separated).
    #[arg(long = "rho", value_delimiter = ',', default_values_t = [0.5])]
    pub rhos: Vec<f64>,
    /// Samples per seed.
    #[arg(long, default_value_t = 100_000)]
    pub n: usize,
    #[arg(long, default_value_t = 20)]
    pub seeds: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1e-6)]
    pub xi: f64,
}

#[derive(Debug, Clone, Args)]
pub struct DataFlags {
    #[arg(long, default_value_t = 200)]
    pub train_size: usize,
    #[arg(long, default_value_t = 25)]
    pub val_size: usize,
    #[arg(long, default_value_t = 50)]
    pub test_size: usize,
    /// Image side in pixels.
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    #[arg(long, default_value_t = 0)]
    pub data_seed: u64,
    #[arg(long, default_value_t = 0.1)]
    pub noise: f64,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Output directory for the checkpoint and history.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub data: DataFlags,
    #[arg(long, default_value_t = 0.05)]
    pub lr: f64,
    #[arg(long, default_value_t = 1500)]
    pub max_iter: usize,
    #[arg(long, default_value_t = 100)]
    pub slow_iters: usize,
    #[arg(long, default_value_t = 0.9)]
    pub power: f64,
    #[arg(long, default_value_t = 2)]
    pub batch: usize,
    #[arg(long, default_value_t = 0.5)]
    pub lambda: f64,
    #[arg(long, default_value_t = 4)]
    pub df: usize,
    #[arg(long, default_value = "avg", value_parser = parse_pool)]
    pub pool: PoolMode,
    #[arg(long, default_value_t = 3)]
    pub region_side: usize,
    #[arg(long, default_value_t = 1e-6)]
    pub xi: f64,
    #[arg(long, default_value_t = 0.9)]
    pub momentum: f64,
    #[arg(long, default_value_t = 1e-4)]
    pub weight_decay: f64,
    /// Disable random left-right flips.
    #[arg(long)]
    pub no_flip: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Checkpoint directory written by `train`; omitted means a fresh model.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, default_value = "test", value_parser = ["train", "val", "test"])]
    pub split: String,
    #[command(flatten)]
    pub data: DataFlags,
    /// Initialization seed of the fresh model.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

fn parse_pool(s: &str) -> Result<PoolMode, String> {
    s.parse()
}

fn parse_precision(s: &str) -> Result<FdPrecision, String> {
    s.parse()
}
