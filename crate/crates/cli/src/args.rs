//! Command-line flags. Every flag's id is its dotted config-file key.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(
    name = "nielab",
    version,
    about = "Neural integral equation laboratory: generate data, solve, train, evaluate, benchmark"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic dataset (manifest.json + curves/).
    Generate(GenerateArgs),
    /// Solve an analytic integral equation and compare with its closed form.
    Solve(SolveArgs),
    /// Train an NIE or ANIE model.
    Train(TrainArgs),
    /// Evaluate a trained checkpoint under an initialization protocol.
    Eval(EvalArgs),
    /// Seconds per training iteration over random-init repeats.
    Bench(BenchArgs),
    /// Export per-head attention weights of an ANIE model.
    AttnDump(AttnDumpArgs),
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// Output directory.
    #[arg(long = "out", id = "run.out", default_value = "runs/out")]
    pub out: PathBuf,
    /// Global seed (falls back to NIELAB_SEED).
    #[arg(long = "seed", id = "run.seed", env = "NIELAB_SEED", default_value_t = 0)]
    pub seed: u64,
    /// Worker threads; only 1 (deterministic) is supported.
    #[arg(long = "workers", id = "run.workers", default_value_t = 1)]
    pub workers: usize,
    /// Flat JSON config with dotted keys; flags override it.
    #[arg(long = "config", id = "run.config")]
    pub config: Option<PathBuf>,
    /// Also write static SVG plots.
    #[arg(long = "svg", id = "run.svg", default_value_t = false, action = clap::ArgAction::Set)]
    pub svg: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum System {
    LotkaVolterra,
    Lorenz,
    IeSpirals,
}

#[derive(Debug, Args)]
pub struct DataArgs {
    /// Dataset directory; empty means generate `--system` in memory.
    #[arg(long = "data", id = "data.path", default_value = "")]
    pub path: String,
    /// Generator used when no dataset directory is given.
    #[arg(long = "system", id = "data.system", value_enum, default_value = "ie-spirals")]
    pub system: System,
    #[arg(long = "n-curves", id = "data.n_curves", default_value_t = 50)]
    pub n_curves: usize,
    /// Grid points per spiral.
    #[arg(long = "spiral-points", id = "data.spiral_points", default_value_t = 100)]
    pub spiral_points: usize,
    /// MC samples used to generate spirals.
    #[arg(long = "spiral-samples", id = "data.spiral_samples", default_value_t = 10000)]
    pub spiral_samples: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ModelKind {
    Nie,
    Anie,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Act {
    Identity,
    Tanh,
    Relu,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Mask {
    None,
    Causal,
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    #[arg(long = "model", id = "model.kind", value_enum, default_value = "anie")]
    pub kind: ModelKind,
    #[arg(long = "activation", id = "model.activation", value_enum, default_value = "tanh")]
    pub activation: Act,
    /// Scale of the output layer at initialization.
    #[arg(long = "output-scale", id = "model.output_scale", default_value_t = 0.1)]
    pub output_scale: f64,
    /// Comma-separated hidden widths of the kernel MLP.
    #[arg(long = "nie-kernel-hidden", id = "nie.kernel_hidden", default_value = "32,32")]
    pub kernel_hidden: String,
    #[arg(long = "nie-nonlinearity-hidden", id = "nie.nonlinearity_hidden", default_value = "32")]
    pub nonlinearity_hidden: String,
    /// Output width of F; 0 means the state dimension.
    #[arg(long = "nie-latent-dim", id = "nie.latent_dim", default_value_t = 0)]
    pub latent_dim: usize,
    /// Kernel inputs are multiplied by this; 0 means 1 / (t_end - t_0).
    #[arg(long = "nie-time-scale", id = "nie.time_scale", default_value_t = 0.0)]
    pub time_scale: f64,
    #[arg(long = "nie-volterra", id = "nie.volterra", default_value_t = false, action = clap::ArgAction::Set)]
    pub volterra: bool,
    #[arg(long = "anie-d-model", id = "anie.d_model", default_value_t = 64)]
    pub d_model: usize,
    #[arg(long = "anie-heads", id = "anie.heads", default_value_t = 4)]
    pub heads: usize,
    /// Distinct attention blocks; iteration i uses block min(i, blocks - 1).
    #[arg(long = "anie-blocks", id = "anie.blocks", default_value_t = 1)]
    pub blocks: usize,
    #[arg(long = "anie-mask", id = "anie.mask", value_enum, default_value = "causal")]
    pub mask: Mask,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum MetricArg {
    RelativeL2,
    MaxAbs,
}

#[derive(Debug, Args)]
pub struct SolverArgs {
    #[arg(long = "max-iter", id = "solver.max_iter", default_value_t = 3)]
    pub max_iter: usize,
    #[arg(long = "tolerance", id = "solver.tolerance", default_value_t = 1e-3)]
    pub tolerance: f64,
    #[arg(long = "n-samples", id = "solver.n_samples", default_value_t = 100)]
    pub n_samples: usize,
    #[arg(long = "metric", id = "solver.metric", value_enum, default_value = "relative-l2")]
    pub metric: MetricArg,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Protocol {
    FirstHalf,
    FirstK,
    SinglePoint,
}

#[derive(Debug, Args)]
pub struct TrainingArgs {
    #[arg(long = "epochs", id = "train.epochs", default_value_t = 100)]
    pub epochs: usize,
    #[arg(long = "batch-size", id = "train.batch_size", default_value_t = 16)]
    pub batch_size: usize,
    #[arg(long = "lr", id = "train.lr", default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long = "l2", id = "train.l2", default_value_t = 0.0)]
    pub l2: f64,
    /// Observed prefix during training.
    #[arg(long = "init", id = "train.init", value_enum, default_value = "first-k")]
    pub init: Protocol,
    /// Prefix length for `--init first-k`.
    #[arg(long = "init-k", id = "train.init_k", default_value_t = 20)]
    pub init_k: usize,
    /// Global gradient-norm clip; 0 disables.
    #[arg(long = "clip-norm", id = "train.clip_norm", default_value_t = 10.0)]
    pub clip_norm: f64,
    /// Fraction of curves held out (the last ones).
    #[arg(long = "holdout", id = "train.holdout", default_value_t = 0.2)]
    pub holdout: f64,
    /// Per-channel standardization fitted on the training split.
    #[arg(long = "normalize", id = "train.normalize", default_value_t = true, action = clap::ArgAction::Set)]
    pub normalize: bool,
    /// Redraw quadrature samples every epoch.
    #[arg(long = "resample", id = "train.resample", default_value_t = true, action = clap::ArgAction::Set)]
    pub resample: bool,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[command(flatten)]
    pub run: RunArgs,
    #[arg(long = "system", id = "data.system", value_enum, default_value = "ie-spirals")]
    pub system: System,
    #[arg(long = "n-curves", id = "data.n_curves", default_value_t = 100)]
    pub n_curves: usize,
    #[arg(long = "spiral-points", id = "data.spiral_points", default_value_t = 100)]
    pub spiral_points: usize,
    #[arg(long = "spiral-samples", id = "data.spiral_samples", default_value_t = 10000)]
    pub spiral_samples: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Demo {
    /// y = 1 + ∫₀ᵗ y ds, solution e^t.
    Exponential,
    /// y = t + 0.5 ∫₀¹ y ds, solution t + 0.5.
    Fredholm,
}

#[derive(Debug, Args)]
pub struct SolveArgs {
    #[command(flatten)]
    pub run: RunArgs,
    #[arg(long = "demo", id = "solve.demo", value_enum, default_value = "exponential")]
    pub demo: Demo,
    #[arg(long = "n-points", id = "solve.n_points", default_value_t = 100)]
    pub n_points: usize,
    #[arg(long = "max-iter", id = "solver.max_iter", default_value_t = 15)]
    pub max_iter: usize,
    #[arg(long = "tolerance", id = "solver.tolerance", default_value_t = 0.0)]
    pub tolerance: f64,
    #[arg(long = "n-samples", id = "solver.n_samples", default_value_t = 2000)]
    pub n_samples: usize,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub run: RunArgs,
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub solver: SolverArgs,
    #[command(flatten)]
    pub train: TrainingArgs,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum EvalProtocol {
    /// Show the first half, predict the second.
    FirstHalf,
    /// Show points [k, 2k), predict the rest.
    Shifted,
    /// Show the first point only.
    SinglePoint,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum PlacementArg {
    Rebased,
    Absolute,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub run: RunArgs,
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub solver: SolverArgs,
    /// Checkpoint written by `train`.
    #[arg(long = "checkpoint", id = "eval.checkpoint", default_value = "runs/out/model.ckpt")]
    pub checkpoint: PathBuf,
    #[arg(long = "protocol", id = "eval.protocol", value_enum, default_value = "shifted")]
    pub protocol: EvalProtocol,
    #[arg(long = "k", id = "eval.k", default_value_t = 20)]
    pub k: usize,
    #[arg(long = "placement", id = "eval.placement", value_enum, default_value = "rebased")]
    pub placement: PlacementArg,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[command(flatten)]
    pub run: RunArgs,
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub solver: SolverArgs,
    #[command(flatten)]
    pub train: TrainingArgs,
    #[arg(long = "repeats", id = "bench.repeats", default_value_t = 5)]
    pub repeats: usize,
    /// Also time 2 x max-iter and report the growth factor.
    #[arg(long = "doubling", id = "bench.doubling", default_value_t = true, action = clap::ArgAction::Set)]
    pub doubling: bool,
}

#[derive(Debug, Args)]
pub struct AttnDumpArgs {
    #[command(flatten)]
    pub run: RunArgs,
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    /// ANIE checkpoint; empty means a freshly initialized model.
    #[arg(long = "checkpoint", id = "eval.checkpoint", default_value = "")]
    pub checkpoint: String,
    /// Curve whose tokens are attended.
    #[arg(long = "curve", id = "attn.curve", default_value_t = 0)]
    pub curve: usize,
}
