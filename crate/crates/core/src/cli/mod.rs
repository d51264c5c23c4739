//! Command-line front end.
//!
//! Exit codes: 0 success, 2 data errors, 3 convergence or separation
//! failures, 4 bad flags or configuration, 5 unreliable simulation study.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::error::{PanelError, Result};

mod commands;
pub mod config;
pub mod json;

const FAMILIES: [&str; 4] = ["probit", "logit", "poisson", "gaussian"];
const VARIANCE_MODES: [&str; 4] = ["conditional", "iid-units", "stationary-times", "both"];

#[derive(Debug, Parser)]
#[command(name = "twofe", version, about = "Fixed-effects panel estimation with analytical and jackknife bias corrections")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit a model to a long-format CSV and print a JSON report
    Estimate(EstimateArgs),
    /// Run a Monte Carlo study
    Simulate(SimulateArgs),
    /// Print exact bias, dispersion and coverage for the Gaussian variance model
    Oracle(OracleArgs),
    /// Test slope homogeneity between two halves of the panel
    Test(TestArgs),
    /// Write one simulated panel as CSV
    Generate(GenerateArgs),
}

/// Input, model and output options shared by `estimate` and `test`.
#[derive(Debug, Args)]
pub struct DataArgs {
    /// Long-format CSV with columns id,time,y,x1..xK
    pub input: Option<PathBuf>,
    /// JSON config file; flags override its values
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_parser = FAMILIES)]
    pub family: Option<String>,
    /// Unit id column
    #[arg(long)]
    pub id: Option<String>,
    /// Time column
    #[arg(long)]
    pub time: Option<String>,
    /// Outcome column
    #[arg(long)]
    pub y: Option<String>,
    /// Regressor columns, comma separated (default: all others)
    #[arg(long, value_delimiter = ',')]
    pub x: Option<Vec<String>>,
    /// drop-first-gamma, drop-first-alpha, penalty or penalty:<b>
    #[arg(long)]
    pub normalization: Option<String>,
    /// Drop units and periods with all-equal binary or all-zero count outcomes
    #[arg(long)]
    pub drop_separated: bool,
    #[arg(long)]
    pub threads: Option<usize>,
    /// Output file (default: standard output)
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EstimateArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, value_parser = ["none", "analytical", "jackknife", "both"])]
    pub correction: Option<String>,
    /// Trimming parameter L for the dynamic bias term
    #[arg(long)]
    pub trim: Option<usize>,
    /// Partial effect `k:kind` (binary, continuous, poisson) or
    /// `k:poisson-square:j`, `k:poisson-log1p:j`; repeatable
    #[arg(long)]
    pub effect: Vec<String>,
    #[arg(long, value_parser = VARIANCE_MODES)]
    pub variance_mode: Option<String>,
    /// Use the variants without the information equality
    #[arg(long)]
    pub no_bartlett: bool,
    /// Average the jackknife over this many random unit half-splits
    #[arg(long)]
    pub jackknife_draws: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct TestArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, default_value = "time", value_parser = ["time", "cross-section"])]
    pub axis: String,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// JSON study config; flags override its values
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Design name, e.g. static-probit-ar
    #[arg(long)]
    pub dgp: Option<String>,
    #[arg(long = "N")]
    pub n: Option<usize>,
    #[arg(long = "T")]
    pub t: Option<usize>,
    #[arg(long)]
    pub reps: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// True slopes, comma separated
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
    pub beta: Option<Vec<f64>>,
    #[arg(long)]
    pub effect_sd: Option<f64>,
    /// Calibration CSV for the calibrated design
    #[arg(long)]
    pub calibration: Option<PathBuf>,
    #[arg(long)]
    pub copies: Option<usize>,
    /// Trimming parameters, comma separated or repeated
    #[arg(long, value_delimiter = ',')]
    pub trim: Vec<usize>,
    #[arg(long)]
    pub no_jackknife: bool,
    #[arg(long)]
    pub no_bartlett: bool,
    #[arg(long, value_parser = VARIANCE_MODES)]
    pub variance_mode: Option<String>,
    #[arg(long)]
    pub effect: Vec<String>,
    #[arg(long)]
    pub threads: Option<usize>,
    /// JSON report path; the text table goes next to it with extension .txt
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct OracleArgs {
    #[arg(long = "N")]
    pub n: Option<usize>,
    #[arg(long = "T")]
    pub t: Option<usize>,
    /// Also simulate the jackknife with this many replications
    #[arg(long)]
    pub jackknife_reps: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub threads: Option<usize>,
    /// JSON output path
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    /// JSON design spec; flags override its values
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub dgp: Option<String>,
    #[arg(long = "N")]
    pub n: Option<usize>,
    #[arg(long = "T")]
    pub t: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Replication index; draws the same panel as replication `rep` of a study
    #[arg(long, default_value_t = 0)]
    pub rep: usize,
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
    pub beta: Option<Vec<f64>>,
    #[arg(long)]
    pub effect_sd: Option<f64>,
    #[arg(long)]
    pub calibration: Option<PathBuf>,
    #[arg(long)]
    pub copies: Option<usize>,
    /// CSV output path
    #[arg(long)]
    pub out: PathBuf,
    /// Also write the true parameters as JSON
    #[arg(long)]
    pub truth: Option<PathBuf>,
}

pub fn exit_code(e: &PanelError) -> i32 {
    match e {
        PanelError::StudyUnreliable { .. } => 5,
        PanelError::Config(_) | PanelError::InvalidTrim { .. } | PanelError::InvalidSpec(_) => 4,
        PanelError::JackknifeSubfit { source, .. } => exit_code(source),
        e if e.is_data_error() => 2,
        _ => 3,
    }
}

/// Runs a parsed command; `Ok` holds the exit code.
pub fn execute(cli: &Cli) -> Result<i32> {
    match &cli.command {
        Command::Estimate(a) => commands::estimate(a),
        Command::Simulate(a) => commands::simulate(a),
        Command::Oracle(a) => commands::oracle_cmd(a),
        Command::Test(a) => commands::test(a),
        Command::Generate(a) => commands::generate(a),
    }
}

/// Parses `args` (program name first), runs the command and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 4 } else { 0 };
        }
    };
    match execute(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
