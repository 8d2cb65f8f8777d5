//! `pgvi`: command-line front end for Polya-Gamma variational inference.

mod commands;
mod manifest;

use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

#[derive(Parser)]
#[command(name = "pgvi", version, about = "Variational inference for binomial logistic hierarchical models")]
struct Cli {
    /// Worker threads for draws, folds and replicates (0 = all cores).
    #[arg(long, global = true, env = "PGVI_THREADS", default_value_t = 0)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit a variational approximation and write a fit document.
    Fit(FitArgs),
    /// Sample from a fitted approximation, optionally post-processed by MAVB.
    Draw(DrawArgs),
    /// Run the Polya-Gamma Gibbs sampler and write its draws.
    Gibbs(GibbsArgs),
    /// K-fold cross-validated deviance.
    Cv(CvArgs),
    /// Simulate a dataset from the crossed design or from a fit.
    Simulate(SimulateArgs),
    /// Compare two draw files (reference first).
    Compare(CompareArgs),
}

#[derive(Args, Serialize, Clone)]
pub struct DataArgs {
    /// Delimited data file with a header row (`-` for stdin).
    #[arg(long)]
    pub data: String,
    /// Model formula, e.g. `y/n ~ 1 + x + (1 | g)`.
    #[arg(long)]
    pub formula: String,
    #[arg(long, default_value_t = ',')]
    pub delimiter: char,
    /// Round non-integer successes and trials.
    #[arg(long)]
    pub round_binomial: bool,
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum AccelArg {
    None,
    Px,
    Joint,
    Both,
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum InitArg {
    Em,
    Random,
}

#[derive(Args, Serialize, Clone)]
pub struct ModelArgs {
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u8).range(1..=3))]
    pub scheme: u8,
    /// Acceleration; defaults to `both` for schemes 1 and 2 and `none` for 3.
    #[arg(long, value_enum)]
    pub accel: Option<AccelArg>,
    #[arg(long, default_value_t = 1e-8)]
    pub tol_elbo: f64,
    #[arg(long, default_value_t = 1e-5)]
    pub tol_param: f64,
    #[arg(long, default_value_t = 1000)]
    pub max_iter: usize,
    #[arg(long, value_enum, default_value_t = InitArg::Em)]
    pub init: InitArg,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Serialize)]
pub struct FitArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    /// Output path (stdout when omitted).
    #[arg(long)]
    pub out: Option<String>,
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum MavbArg {
    Off,
    Improper,
    Proper,
}

#[derive(Args, Serialize)]
pub struct DrawArgs {
    /// Fit document (`-` for stdin).
    #[arg(long)]
    pub fit: String,
    #[arg(long, default_value_t = 4000)]
    pub samples: usize,
    #[arg(long, value_enum, default_value_t = MavbArg::Off)]
    pub mavb: MavbArg,
    /// Working-prior variance for `--mavb proper`.
    #[arg(long)]
    pub tau2: Option<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: Option<String>,
}

#[derive(Args, Serialize)]
pub struct GibbsArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Sweeps kept after burn-in (before thinning).
    #[arg(long, default_value_t = 10_000)]
    pub iters: usize,
    #[arg(long, default_value_t = 2000)]
    pub burn_in: usize,
    #[arg(long, default_value_t = 1)]
    pub thin: usize,
    /// Disable the marginal-augmentation recentring step.
    #[arg(long)]
    pub no_augment: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: Option<String>,
}

#[derive(Args, Serialize)]
pub struct CvArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long, default_value_t = 10)]
    pub folds: usize,
    #[arg(long)]
    pub out: Option<String>,
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum, Serialize)]
pub enum Preset {
    /// 1000 Bernoulli rows, ten covariates, two crossed effects of ten groups.
    #[value(name = "paper-sec4")]
    #[serde(rename = "paper-sec4")]
    PaperSec4,
}

#[derive(Args, Serialize)]
pub struct SimulateArgs {
    #[arg(long, value_enum)]
    pub preset: Option<Preset>,
    #[arg(long)]
    pub n_obs: Option<usize>,
    #[arg(long)]
    pub covariates: Option<usize>,
    /// Groups per random intercept, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub groups: Option<Vec<usize>>,
    #[arg(long)]
    pub sigma_beta: Option<f64>,
    #[arg(long)]
    pub sigma_alpha: Option<f64>,
    #[arg(long)]
    pub rho: Option<f64>,
    /// Binomial trials per row.
    #[arg(long)]
    pub trials: Option<u32>,
    /// Resample the response of `--data` from this fit's posterior means.
    #[arg(long, requires = "data")]
    pub from_fit: Option<String>,
    /// Source table for `--from-fit`.
    #[arg(long)]
    pub data: Option<String>,
    #[arg(long, default_value_t = ',')]
    pub delimiter: char,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Also write the true coefficients as JSON here.
    #[arg(long)]
    pub truth: Option<String>,
    #[arg(long)]
    pub out: Option<String>,
}

#[derive(Args, Serialize)]
pub struct CompareArgs {
    /// Reference draws.
    pub reference: String,
    /// Candidate draws.
    pub candidate: String,
    /// True coefficients (as written by `simulate --truth`) for coverage.
    #[arg(long)]
    pub truth: Option<String>,
    #[arg(long)]
    pub out: Option<String>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if cli.threads > 0 {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build_global() {
            log::warn!("could not size the thread pool: {e}");
        }
    }
    let result = match &cli.command {
        Command::Fit(a) => commands::fit(a),
        Command::Draw(a) => commands::draw(a),
        Command::Gibbs(a) => commands::gibbs(a),
        Command::Cv(a) => commands::cv(a),
        Command::Simulate(a) => commands::simulate(a),
        Command::Compare(a) => commands::compare(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let code = commands::exit_code(&e);
            if code != commands::EXIT_NOT_CONVERGED {
                eprintln!("error: {e:#}");
            } else {
                eprintln!("{e:#}");
            }
            ExitCode::from(code)
        }
    }
}
