//! `dorqf`: distributional outcome regression from the command line.

mod commands;
mod error;
mod io;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{ArgGroup, Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::error::{CliError, CliResult};

#[derive(Debug, Parser)]
#[command(name = "dorqf", version, about = "Distributional outcome regression via quantile functions")]
struct Cli {
    /// Worker threads; falls back to DORQF_THREADS, then to the machine's parallelism.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Repeat for more log output on standard error.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Empirical quantile functions from raw long-format samples.
    Quantiles(QuantilesArgs),
    /// Fit the shape-constrained model.
    Fit(FitArgs),
    /// Predict outcome quantile functions from a fit archive.
    Predict(PredictArgs),
    /// Cross-validate the Bernstein order.
    Cv(CvArgs),
    /// Joint confidence band for a coefficient function.
    Band(BandArgs),
    /// Global test for the effect of one term.
    Test(TestArgs),
    /// Simulation studies and scenario exports.
    Simulate(SimulateArgs),
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct GridArgs {
    /// Number of equispaced grid points.
    #[arg(long, default_value_t = 100)]
    pub grid_m: usize,
    /// Lowest grid probability.
    #[arg(long, default_value_t = 0.005)]
    pub grid_lo: f64,
    /// Highest grid probability.
    #[arg(long, default_value_t = 0.995)]
    pub grid_hi: f64,
    /// Grid points, one per line; overrides the equispaced grid.
    #[arg(long)]
    pub grid_file: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct QuantilesArgs {
    /// Long CSV with columns subject_id, variable, value.
    #[arg(long)]
    pub input: PathBuf,
    #[command(flatten)]
    pub grid: GridArgs,
    /// Output directory.
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Submodel {
    /// Every supplied term.
    Full,
    /// Scalar covariates only.
    Qfosr,
    /// Distributional predictor only.
    Dord,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct DataArgs {
    /// Wide CSV of outcome quantile functions.
    #[arg(long)]
    pub outcomes: PathBuf,
    /// Wide CSV of predictor quantile functions.
    #[arg(long)]
    pub predictors: Option<PathBuf>,
    /// CSV of scalar covariates keyed by subject_id.
    #[arg(long)]
    pub covariates: Option<PathBuf>,
    /// Covariate columns to use, comma separated; default all.
    #[arg(long, value_delimiter = ',')]
    pub columns: Option<Vec<String>>,
    /// Terms entering the model.
    #[arg(long, value_enum, default_value_t = Submodel::Full)]
    pub submodel: Submodel,
}

#[derive(Debug, Clone, Args, Serialize)]
#[command(group(ArgGroup::new("order_choice").args(["order", "cv_orders"])))]
pub struct FitArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Bernstein order N.
    #[arg(long)]
    pub order: Option<usize>,
    /// Choose N by cross-validation over these orders.
    #[arg(long, value_delimiter = ',')]
    pub cv_orders: Option<Vec<usize>>,
    /// Cross-validation folds.
    #[arg(long, default_value_t = 5)]
    pub folds: usize,
    /// Seed for fold assignment and resampling.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Ridge penalty on the coefficients.
    #[arg(long, default_value_t = 0.0)]
    pub ridge: f64,
    /// Proportion of residual variance kept by the principal components.
    #[arg(long, default_value_t = dorqf::covariance::DEFAULT_PVE)]
    pub pve: f64,
    /// Skip the covariance estimate; the archive then cannot produce bands.
    #[arg(long)]
    pub point_only: bool,
    /// Also write the constraint matrix.
    #[arg(long)]
    pub export_constraints: bool,
    /// Output directory.
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct PredictArgs {
    /// Fit archive written by `fit`.
    #[arg(long)]
    pub fit: PathBuf,
    /// Covariates of the subjects to predict, on the raw scale.
    #[arg(long)]
    pub covariates: Option<PathBuf>,
    /// Predictor quantile functions of the subjects to predict.
    #[arg(long)]
    pub predictors: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Weighting {
    Quadrature,
    Unweighted,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct CvArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Candidate Bernstein orders.
    #[arg(long, value_delimiter = ',', default_value = "1,2,3,4,5,6,7,8")]
    pub orders: Vec<usize>,
    /// Cross-validation folds.
    #[arg(long, default_value_t = 5)]
    pub folds: usize,
    /// Seed for fold assignment and resampling.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Whether fold errors use grid quadrature weights.
    #[arg(long, value_enum, default_value_t = Weighting::Quadrature)]
    pub weighting: Weighting,
    /// Ridge penalty on the coefficients.
    #[arg(long, default_value_t = 0.0)]
    pub ridge: f64,
    /// Also report leave-one-subject-out R² at the selected order.
    #[arg(long)]
    pub r2: bool,
    /// Output directory.
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct BandArgs {
    /// Fit archive written by `fit`.
    #[arg(long)]
    pub fit: PathBuf,
    /// beta0, beta1, ..., or gamma.
    #[arg(long, default_value = "beta1")]
    pub target: String,
    /// Joint band level.
    #[arg(long, default_value_t = 0.05)]
    pub alpha: f64,
    /// Number of projected draws.
    #[arg(long = "B", alias = "samples", default_value_t = dorqf::inference::DEFAULT_BAND_SAMPLES)]
    pub samples: usize,
    /// Seed for fold assignment and resampling.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory.
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum TestMethodArg {
    Bootstrap,
    Band,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct TestArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Covariate name, or `predictor`.
    #[arg(long)]
    pub drop: String,
    /// Residual bootstrap of the full model, or the joint band of the dropped coefficient.
    #[arg(long, value_enum, default_value_t = TestMethodArg::Bootstrap)]
    pub method: TestMethodArg,
    /// Bernstein order of both fits.
    #[arg(long, default_value_t = 3)]
    pub order: usize,
    /// Resamples; defaults to 500 for the bootstrap and 1000 for the band.
    #[arg(long = "B", alias = "samples")]
    pub samples: Option<usize>,
    /// Seed for fold assignment and resampling.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Ridge penalty on the coefficients.
    #[arg(long, default_value_t = 0.0)]
    pub ridge: f64,
    /// Output directory.
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseScaleArg {
    Sd,
    Variance,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseModeArg {
    Before,
    After,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum PowerMethodArg {
    Band,
    Bootstrap,
}

#[derive(Debug, Clone, Args, Serialize)]
#[command(group(ArgGroup::new("mode").required(true).args(["table", "export"])))]
#[command(group(ArgGroup::new("order_choice").args(["order", "cv_orders"])))]
pub struct SimulateArgs {
    /// Report table: 1, 2, 3, s1, s2, or power.
    #[arg(long)]
    pub table: Option<String>,
    /// Write one generated replication as input files instead of running a study.
    #[arg(long)]
    pub export: bool,
    /// Scenario of an export: A1, A2, or B.
    #[arg(long, default_value = "A1")]
    pub scenario: String,
    /// Replication index of an export.
    #[arg(long, default_value_t = 0)]
    pub rep: usize,
    /// Subjects per replication; a list runs one cell per value.
    #[arg(long, value_delimiter = ',')]
    pub n: Option<Vec<usize>>,
    /// Draws per subject; `inf` observes the latent quantile functions.
    #[arg(long = "L", value_delimiter = ',')]
    pub l: Option<Vec<String>>,
    /// Monte Carlo replications per cell.
    #[arg(long)]
    pub reps: Option<usize>,
    /// Master seed; every replication draws from its own derived stream.
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Probability grid size.
    #[arg(long)]
    pub m: Option<usize>,
    /// Residual noise level, read according to --noise-scale.
    #[arg(long)]
    pub noise: Option<f64>,
    /// Whether --noise is a standard deviation or a variance.
    #[arg(long, value_enum)]
    pub noise_scale: Option<NoiseScaleArg>,
    /// Add noise to the latent curve before sampling, or to the empirical quantiles after.
    #[arg(long, value_enum)]
    pub noise_mode: Option<NoiseModeArg>,
    /// Held-out subjects per replication.
    #[arg(long)]
    pub test_size: Option<usize>,
    /// Fixed Bernstein order; default is cross-validation in every replication.
    #[arg(long)]
    pub order: Option<usize>,
    /// Candidate orders for cross-validation.
    #[arg(long, value_delimiter = ',')]
    pub cv_orders: Option<Vec<usize>>,
    /// Cross-validation folds.
    #[arg(long)]
    pub folds: Option<usize>,
    /// Orders of the coverage table.
    #[arg(long, value_delimiter = ',')]
    pub coverage_orders: Option<Vec<usize>>,
    /// Band level and test size.
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Projected draws per band.
    #[arg(long = "B")]
    pub band_samples: Option<usize>,
    /// Departures of the power study.
    #[arg(long, value_delimiter = ',')]
    pub d: Option<Vec<f64>>,
    /// Bernstein order of the power study.
    #[arg(long)]
    pub power_order: Option<usize>,
    /// Test used by the power study.
    #[arg(long, value_enum)]
    pub power_method: Option<PowerMethodArg>,
    /// Bootstrap samples when --power-method is bootstrap.
    #[arg(long, default_value_t = dorqf::inference::DEFAULT_BOOTSTRAP_SAMPLES)]
    pub bootstrap_samples: usize,
    /// Directory for report tables and the manifest.
    #[arg(long)]
    pub out_dir: PathBuf,
}

fn resolve_threads(flag: Option<usize>) -> CliResult<usize> {
    let n = match flag {
        Some(n) => n,
        None => match std::env::var("DORQF_THREADS") {
            Ok(v) => v
                .trim()
                .parse()
                .map_err(|_| CliError::Usage(format!("DORQF_THREADS must be a positive integer, got '{v}'")))?,
            Err(_) => std::thread::available_parallelism().map_or(1, |n| n.get()),
        },
    };
    if n == 0 {
        return Err(CliError::Usage("thread count must be positive".into()));
    }
    Ok(n)
}

fn run(cli: Cli) -> CliResult<()> {
    let threads = resolve_threads(cli.threads)?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| CliError::Usage(format!("cannot start thread pool: {e}")))?;
    match cli.command {
        Command::Quantiles(a) => commands::quantiles(&a, threads),
        Command::Fit(a) => commands::fit(&a, threads),
        Command::Predict(a) => commands::predict(&a, threads),
        Command::Cv(a) => commands::cv(&a, threads),
        Command::Band(a) => commands::band(&a, threads),
        Command::Test(a) => commands::test(&a, threads),
        Command::Simulate(a) => commands::simulate(&a, threads),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .target(env_logger::Target::Stderr)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
