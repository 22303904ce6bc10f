//! Command-line front end for `glmm-deriv`: reads a CSV and a JSON model
//! config, fits or reloads a model and writes derivatives and tests as
//! JSON or CSV.

pub mod commands;
pub mod config;
pub mod error;
pub mod ingest;
pub mod output;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

pub use config::ModelConfig;
pub use error::{CliError, Result};
pub use ingest::{ingest_csv, Ingested};

#[derive(Debug, Parser)]
#[command(name = "glmm-deriv", version, about = "Scores, Hessians and model tests for GLMMs")]
pub struct Cli {
    /// Worker threads for the parallel kernels (0 = all cores).
    #[arg(long, global = true, env = "GLMM_DERIV_THREADS", default_value_t = 0)]
    pub threads: usize,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Ranpar {
    Theta,
    Var,
    Sd,
}

impl From<Ranpar> for glmm_deriv::Parameterization {
    fn from(r: Ranpar) -> Self {
        match r {
            Ranpar::Theta => Self::Theta,
            Ranpar::Var => Self::Var,
            Ranpar::Sd => Self::Sd,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FunctionalArg {
    Dm,
    Cvm,
    Maxlm,
    Maxlmo,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ChisqMethod {
    Imhof,
    Mc,
}

/// Reloads a fit written by `fit` against its data.
#[derive(Debug, Args)]
pub struct FitInput {
    /// Fit JSON written by `fit`.
    #[arg(long)]
    pub fit: PathBuf,
    /// The CSV the model was fitted to.
    #[arg(long)]
    pub data: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Maximum-likelihood fit by adaptive Gauss-Hermite quadrature.
    Fit {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: PathBuf,
        /// Quadrature points; overrides the config's nAGQ.
        #[arg(long)]
        nagq: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Casewise score matrix (clusters x parameters) as CSV.
    Scores {
        #[command(flatten)]
        input: FitInput,
        #[arg(long, value_enum, default_value_t = Ranpar::Var)]
        ranpar: Ranpar,
        #[arg(long, default_value_t = 5)]
        nagq: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Hessian of the marginal log-likelihood.
    Hessian {
        #[command(flatten)]
        input: FitInput,
        #[arg(long, value_enum, default_value_t = Ranpar::Var)]
        ranpar: Ranpar,
        #[arg(long, default_value_t = 5)]
        nagq: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Sandwich and model-based covariance matrices.
    Sandwich {
        #[command(flatten)]
        input: FitInput,
        #[arg(long, value_enum, default_value_t = Ranpar::Var)]
        ranpar: Ranpar,
        #[arg(long, default_value_t = 5)]
        nagq: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score-based parameter instability test along a cluster-level variable.
    Sctest {
        #[command(flatten)]
        input: FitInput,
        /// Column to order clusters by; must be constant within clusters.
        #[arg(long)]
        order_by: String,
        /// Zero-based parameter indices to test (default: all).
        #[arg(long, value_delimiter = ',')]
        parm: Option<Vec<usize>>,
        #[arg(long, value_enum, default_value_t = FunctionalArg::Dm)]
        functional: FunctionalArg,
        #[arg(long)]
        seed: u64,
        #[arg(long, default_value_t = 50_000)]
        replications: usize,
        /// Trimming for maxlm.
        #[arg(long, default_value_t = 0.1)]
        trim: f64,
        #[arg(long, value_enum, default_value_t = Ranpar::Var)]
        ranpar: Ranpar,
        #[arg(long, default_value_t = 5)]
        nagq: usize,
        #[arg(long)]
        out: PathBuf,
        /// Fluctuation path CSV (default: next to --out with a `_path.csv` suffix).
        #[arg(long)]
        path_out: Option<PathBuf>,
    },
    /// Vuong variance and likelihood ratio tests for two fits to the same clusters.
    Vuong {
        #[arg(long)]
        fit1: PathBuf,
        #[arg(long)]
        fit2: PathBuf,
        /// CSV both models were fitted to.
        #[arg(long)]
        data: PathBuf,
        /// The first model contains the second.
        #[arg(long)]
        nested: bool,
        #[arg(long)]
        seed: u64,
        /// Weighted chi-square tail method.
        #[arg(long, value_enum, default_value_t = ChisqMethod::Imhof)]
        method: ChisqMethod,
        /// Draws for `--method mc`.
        #[arg(long, default_value_t = 1_000_000)]
        draws: usize,
        #[arg(long, default_value_t = 5)]
        nagq: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Parses `args` (including the program name), runs the command and returns
/// the process exit code: 0 on success, 1 on failure with an error JSON on
/// stderr, 2 on usage errors.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    if cli.threads > 0 {
        // the pool can only be sized once per process; later calls keep it
        let _ = glmm_deriv::par::configure_threads(cli.threads);
    }
    match commands::dispatch(&cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{}", e.to_json());
            1
        }
    }
}
