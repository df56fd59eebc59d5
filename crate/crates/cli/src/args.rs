use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use wstoch_core::barycenter::BarycenterVariant;
use wstoch_core::simplex::{ScheduleKind, DEFAULT_C0};
use wstoch_core::CostFunction;

#[derive(Debug, Parser)]
#[command(name = "wstoch", version, about = "Regularized Wasserstein estimation by averaged stochastic dual ascent")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Estimate a measure on the prior's support from an observed measure.
    Estimate(EstimateArgs),
    /// Estimate mixture weights over fixed component measures.
    Mixture(MixtureArgs),
    /// Regularized barycenter of several measures.
    Barycenter(BarycenterArgs),
    /// Run a seeded experiment grid and write CSV results.
    Experiment(ExperimentArgs),
}

/// Flags shared by every solver command.
#[derive(Debug, Clone, Args)]
pub struct SolverArgs {
    /// Prior measure file (JSON).
    #[arg(long)]
    pub beta: PathBuf,
    #[arg(long, value_parser = parse_cost, default_value = "sqeuclidean")]
    pub cost: CostFunction,
    #[arg(long)]
    pub epsilon: f64,
    /// Target-side regularization; must exceed epsilon.
    #[arg(long)]
    pub eta: f64,
    #[arg(long, default_value_t = 100_000)]
    pub steps: u64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = DEFAULT_C0)]
    pub c0: f64,
    #[arg(long, value_parser = parse_schedule, default_value = "combined")]
    pub schedule: ScheduleKind,
    /// Overrides the logarithmic gap `log(1 / min beta)`.
    #[arg(long)]
    pub m: Option<f64>,
    /// Average only the last fraction of iterates.
    #[arg(long)]
    pub suffix_alpha: Option<f64>,
    /// Keep each updated pair within the optimality box.
    #[arg(long)]
    pub clamp: bool,
    #[arg(long)]
    pub checkpoint_every: Option<u64>,
    /// Output directory (created if missing).
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct EstimateArgs {
    /// Observed measure file (JSON).
    #[arg(long)]
    pub mu: PathBuf,
    #[command(flatten)]
    pub solver: SolverArgs,
    /// Also write the transport plan at the averaged duals.
    #[arg(long)]
    pub plan: bool,
}

#[derive(Debug, Clone, Args)]
pub struct MixtureArgs {
    #[arg(long)]
    pub mu: PathBuf,
    /// Components file: `{"components": [measure, ...]}` on the prior's support.
    #[arg(long)]
    pub components: PathBuf,
    #[command(flatten)]
    pub solver: SolverArgs,
}

#[derive(Debug, Clone, Args)]
pub struct BarycenterArgs {
    /// Input measure files, one per `--mu`.
    #[arg(long, required = true)]
    pub mu: Vec<PathBuf>,
    /// Comma-separated barycenter weights, one per input.
    #[arg(long, value_delimiter = ',', required = true)]
    pub weights: Vec<f64>,
    #[arg(long, value_parser = parse_variant, default_value = "full")]
    pub variant: BarycenterVariant,
    #[command(flatten)]
    pub solver: SolverArgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ExperimentKind {
    Reg,
    Dims,
    Lr,
}

#[derive(Debug, Clone, Args)]
pub struct ExperimentArgs {
    #[arg(value_enum)]
    pub kind: ExperimentKind,
    #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
    pub seeds: Vec<u64>,
    /// Defaults to 1e5 for reg and dims, 1e6 for lr.
    #[arg(long)]
    pub steps: Option<u64>,
    /// reg: epsilon grid (default 0.1,0.01). dims: single epsilon (default 1). eta = 2 epsilon.
    #[arg(long, value_delimiter = ',')]
    pub epsilon: Option<Vec<f64>>,
    /// lr: step-size constants. reg: a single constant (default `B e^(-m) / epsilon`).
    #[arg(long, value_delimiter = ',')]
    pub c0: Option<Vec<f64>>,
    /// dims: sizes used for both I and J.
    #[arg(long, value_delimiter = ',')]
    pub sizes: Option<Vec<usize>>,
    /// reg and lr: grid length.
    #[arg(long)]
    pub grid: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

fn parse_cost(s: &str) -> Result<CostFunction, String> {
    s.parse().map_err(|e: wstoch_core::Error| e.to_string())
}

fn parse_schedule(s: &str) -> Result<ScheduleKind, String> {
    s.parse().map_err(|e: wstoch_core::Error| e.to_string())
}

fn parse_variant(s: &str) -> Result<BarycenterVariant, String> {
    s.parse().map_err(|e: wstoch_core::Error| e.to_string())
}
