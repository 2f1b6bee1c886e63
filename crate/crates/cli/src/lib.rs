//! Command-line front end for the `ivcate` estimators.
//!
//! `simulate` runs a Monte Carlo study from a TOML config, `fit` estimates CATE
//! on a user CSV and `subgroups` summarizes fitted CATE with a regression tree.

pub mod config;
pub mod error;
pub mod fit;
pub mod simulate;
pub mod subgroups;

use std::path::PathBuf;

use clap::{Parser, Subcommand};
use ivcate::estimator::Method;

pub use error::{CliError, CliResult};

/// Environment variable read for the default worker count.
pub const WORKERS_ENV: &str = "IVCATE_WORKERS";

#[derive(Debug, Parser)]
#[command(
    name = "ivcate",
    version,
    about = "CATE and treatment regime estimation with a binary instrument"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run a simulation study and write its metrics table.
    ///
    /// Writes table.txt, summary.csv (one row per estimator and metric) and
    /// replications.csv (one row per replication, estimator and metric) to the
    /// output directory and prints the table. Exit status 2 means a config
    /// error, 1 a runtime failure.
    #[command(after_long_help = config::CONFIG_HELP)]
    Simulate {
        /// TOML config file.
        #[arg(long)]
        config: PathBuf,
        /// Output directory (default: output.dir from the config).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Worker threads; 0 uses every core, 1 runs sequentially.
        #[arg(long, env = WORKERS_ENV, default_value_t = 0)]
        workers: usize,
        /// Override simulation.seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Fit nuisances and one estimator on a CSV; write per-row CATE and the model.
    ///
    /// Treatment and instrument may be coded 0/1 or -1/1 (0 maps to -1). Rows with a
    /// missing value (empty, NA, NaN or .) in a role column are dropped and counted.
    /// Writes cate.csv (row_id, cate_hat, regime) and model.json; row_id is the
    /// 0-based record index in the input file.
    Fit {
        /// Input CSV with a header row.
        #[arg(long)]
        data: PathBuf,
        /// Outcome column.
        #[arg(long)]
        outcome: String,
        /// Binary treatment column.
        #[arg(long)]
        treatment: String,
        /// Binary instrument column.
        #[arg(long)]
        instrument: String,
        /// Comma-separated covariate columns (default: every other column).
        #[arg(long, value_delimiter = ',')]
        covariates: Option<Vec<String>>,
        /// ivdl, ivrdl1, ivrdl2 (h3) or ivrdl2-h1 / ivrdl2-h2.
        #[arg(long, default_value = "ivrdl1")]
        method: Method,
        /// linear, lasso (cross-validated) or krr (cross-validated).
        #[arg(long, default_value = "linear")]
        learner: String,
        /// Trees per nuisance forest.
        #[arg(long, default_value_t = 500)]
        trees: usize,
        /// Minimum rows per nuisance forest leaf.
        #[arg(long, default_value_t = ivcate::nuisance::NUISANCE_MIN_LEAF)]
        min_leaf: usize,
        /// Seed for nuisance forests and KRR cross-validation folds.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Worker threads; 0 uses every core, 1 runs sequentially.
        #[arg(long, env = WORKERS_ENV, default_value_t = 0)]
        workers: usize,
    },
    /// Regression tree of estimated CATE on covariates.
    ///
    /// Joins cate.csv from `fit` with the data file by row_id, prints the splits
    /// with leaf means and population shares, and writes subgroups.txt and
    /// subgroups.json. Exit status 2 on a schema mismatch.
    Subgroups {
        /// cate.csv written by `fit`.
        #[arg(long)]
        cate: PathBuf,
        /// The CSV given to `fit`.
        #[arg(long)]
        data: PathBuf,
        /// Minimum rows per leaf.
        #[arg(long, default_value_t = 50)]
        min_leaf: usize,
        /// Maximum tree depth (default: unlimited).
        #[arg(long)]
        max_depth: Option<usize>,
        /// Comma-separated covariate columns (default: all columns not excluded).
        #[arg(long, value_delimiter = ',')]
        covariates: Option<Vec<String>>,
        /// Columns to leave out when --covariates is not given.
        #[arg(long, value_delimiter = ',', default_value = "y,a,z")]
        exclude: Vec<String>,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
}

/// Execute a parsed command, printing its report on stdout.
pub fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Simulate {
            config,
            out,
            workers,
            seed,
        } => {
            let text = simulate::run(&simulate::SimulateArgs {
                config,
                out,
                workers,
                seed,
            })?;
            print!("{text}");
        }
        Command::Fit {
            data,
            outcome,
            treatment,
            instrument,
            covariates,
            method,
            learner,
            trees,
            min_leaf,
            seed,
            out,
            workers,
        } => {
            let args = fit::FitArgs {
                data,
                outcome,
                treatment,
                instrument,
                covariates,
                method,
                learner,
                num_trees: trees,
                min_leaf,
                seed,
                out,
                workers,
            };
            let summary = fit::run(&args)?;
            println!(
                "fitted {} on {} rows ({} dropped for missing values), covariates: {}",
                method,
                summary.rows,
                summary.dropped,
                summary.covariates.join(", ")
            );
            println!(
                "wrote {} and {}",
                args.out.join(fit::CATE_FILE).display(),
                args.out.join(fit::MODEL_FILE).display()
            );
        }
        Command::Subgroups {
            cate,
            data,
            min_leaf,
            max_depth,
            covariates,
            exclude,
            out,
        } => {
            let text = subgroups::run(&subgroups::SubgroupsArgs {
                cate,
                data,
                covariates,
                exclude,
                min_leaf,
                max_depth,
                out,
            })?;
            print!("{text}");
        }
    }
    Ok(())
}
