#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use prefclust_core::Error;

mod commands;
mod config;

#[derive(Parser, Debug)]
#[command(name = "prefclust", version, about = "Clustered offline preference learning with active augmentation")]
#[command(args_override_self = true)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Sample a clustered population and write its offline comparisons.
    Generate(GenerateArgs),
    /// Run offline methods on a dataset for one or more test users.
    Offline(OfflineArgs),
    /// Run an active method for one test user and write the per-round trace.
    Active(ActiveArgs),
    /// Seeded Monte-Carlo sweep over synthetic environments.
    Sweep(SweepArgs),
    /// Aggregate result CSVs into per-axis mean/stderr panels.
    Report(ReportArgs),
}

#[derive(Args, Debug, Clone)]
pub struct EnvArgs {
    #[arg(long, default_value_t = 40)]
    pub users: usize,
    #[arg(long, default_value_t = 8)]
    pub clusters: usize,
    #[arg(long, default_value_t = 16)]
    pub dim: usize,
    /// Within-cluster spread of user preference vectors.
    #[arg(long, default_value_t = 0.0)]
    pub noise_scale: f64,
    #[arg(long, default_value_t = 1.0)]
    pub center_norm: f64,
    #[arg(long, default_value_t = 0.0)]
    pub min_center_gap: f64,
    #[arg(long, default_value_t = 20)]
    pub contexts: usize,
    #[arg(long, default_value_t = 10)]
    pub actions: usize,
    #[arg(long, default_value_t = 0.0)]
    pub anisotropy: f64,
    /// Comparisons per user.
    #[arg(long, default_value_t = 1000)]
    pub budget: usize,
    /// BTL sharpness: labels follow σ(β θᵀz).
    #[arg(long, default_value_t = 1.0)]
    pub beta: f64,
}

#[derive(Args, Debug, Clone)]
pub struct AlgoArgs {
    #[arg(long, default_value_t = 1.0)]
    pub lambda: f64,
    /// Defaults to the logistic slope floor over the parameter ball.
    #[arg(long)]
    pub kappa: Option<f64>,
    #[arg(long, default_value_t = 1.0)]
    pub alpha: f64,
    #[arg(long, default_value_t = 0.1)]
    pub delta: f64,
    #[arg(long, default_value_t = 0.0)]
    pub gamma_hat: f64,
    #[arg(long, value_enum, default_value_t = GammaPolicyArg::Fixed)]
    pub gamma_policy: GammaPolicyArg,
    /// Multiplier on every confidence radius and on the pessimism width.
    #[arg(long, default_value_t = 1.0)]
    pub radius_scale: f64,
    #[arg(long)]
    pub ir_mode: bool,
    #[arg(long)]
    pub lambda_a: Option<f64>,
    #[arg(long)]
    pub sigma2: Option<f64>,
    #[arg(long)]
    pub cand_size: Option<usize>,
    #[arg(long, value_enum, default_value_t = SearchArg::Auto)]
    pub search: SearchArg,
    #[arg(long, default_value_t = 1e-8)]
    pub tol: f64,
    #[arg(long, default_value_t = 200)]
    pub max_iters: usize,
    #[arg(long, default_value_t = 5)]
    pub knn_k: usize,
    #[arg(long, default_value_t = 50)]
    pub kmeans_restarts: usize,
    /// Defaults to half the median pairwise distance of the estimates.
    #[arg(long)]
    pub dbscan_eps: Option<f64>,
    #[arg(long, default_value_t = 3)]
    pub dbscan_min_pts: usize,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum GammaPolicyArg {
    Fixed,
    Under,
    Over,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum SearchArg {
    Auto,
    Exhaustive,
    Coordinate,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModeArg {
    Finite,
    Ball,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum AxisArg {
    Budget,
    Rounds,
    Dim,
    GammaHat,
}

#[derive(Args, Debug)]
pub struct GenerateArgs {
    /// Flat key = value file; explicit flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Write raw z records instead of context/action triples.
    #[arg(long)]
    pub raw_z: bool,
    #[command(flatten)]
    pub env: EnvArgs,
}

#[derive(Args, Debug)]
pub struct OfflineArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub features: Option<PathBuf>,
    /// Population file with true preference vectors.
    #[arg(long)]
    pub truth: Option<PathBuf>,
    /// Sharpness the data were generated with; scales the truth for
    /// estimation errors.
    #[arg(long, default_value_t = 1.0)]
    pub beta: f64,
    /// Comma-separated test users; all users when omitted.
    #[arg(long)]
    pub test_users: Option<String>,
    #[arg(long, default_value = "offc2pl")]
    pub methods: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub algo: AlgoArgs,
}

#[derive(Args, Debug)]
pub struct ActiveArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub features: Option<PathBuf>,
    /// With a population file labels are simulated; otherwise they are
    /// replayed from the test user's own records.
    #[arg(long)]
    pub truth: Option<PathBuf>,
    #[arg(long, default_value_t = 1.0)]
    pub beta: f64,
    #[arg(long)]
    pub test_user: String,
    #[arg(long, default_value = "a2")]
    pub method: String,
    #[arg(long, default_value_t = 500)]
    pub rounds: usize,
    /// Fraction of every user's records used by the offline phase.
    #[arg(long, default_value_t = 0.2)]
    pub warm_start: f64,
    #[arg(long, value_enum, default_value_t = ModeArg::Finite)]
    pub mode: ModeArg,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub algo: AlgoArgs,
}

#[derive(Args, Debug)]
pub struct SweepArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub axis: AxisArg,
    /// Comma-separated axis values.
    #[arg(long)]
    pub grid: String,
    /// `a..b` (half-open) or a comma-separated list.
    #[arg(long, default_value = "0..20")]
    pub seeds: String,
    #[arg(long, default_value = "offc2pl,pess-per-user")]
    pub methods: String,
    #[arg(long, default_value_t = 500)]
    pub rounds: usize,
    #[arg(long, default_value_t = 0.2)]
    pub warm_start: f64,
    #[arg(long, value_enum, default_value_t = ModeArg::Finite)]
    pub mode: ModeArg,
    /// Test users drawn per seed; every user when omitted.
    #[arg(long)]
    pub test_users: Option<usize>,
    /// Record wall-clock times (output is then not reproducible).
    #[arg(long)]
    pub timing: bool,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub env: EnvArgs,
    #[command(flatten)]
    pub algo: AlgoArgs,
}

#[derive(Args, Debug)]
pub struct ReportArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, num_args = 1.., required = true)]
    pub inputs: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Contract(_) | Error::Size(_) | Error::Unavailable(_) => 2,
        Error::Lookup { kind, .. } if *kind == "method" => 2,
        Error::Data { .. } | Error::Io { .. } | Error::Lookup { .. } => 3,
        Error::Convergence { .. } | Error::NumericalRank(_) => 4,
    }
}

fn main() -> ExitCode {
    let args = match config::expand_args(std::env::args_os().collect()) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(exit_code(&e));
        }
    };
    let cli = Cli::parse_from(args);
    let result = match cli.command {
        Command::Generate(a) => commands::generate(&a),
        Command::Offline(a) => commands::offline(&a),
        Command::Active(a) => commands::active(&a),
        Command::Sweep(a) => commands::sweep(&a),
        Command::Report(a) => commands::report(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
