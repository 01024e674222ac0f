//! Command-line front end for depth uncertainty networks.
//!
//! Exit codes: 0 on success, 2 for usage and configuration problems, 3 when
//! training fails numerically.

use std::fmt;
use std::path::PathBuf;

use clap::{Parser, Subcommand};

pub mod commands;
pub mod config;
pub mod experiment;
pub mod svg;

pub const EXIT_USAGE: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

/// An error carrying the process exit code it maps to.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub msg: String,
}

impl CliError {
    pub fn usage(msg: impl Into<String>) -> Self {
        Self {
            code: EXIT_USAGE,
            msg: msg.into(),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.msg)
    }
}

impl std::error::Error for CliError {}

impl From<dun::Error> for CliError {
    fn from(e: dun::Error) -> Self {
        let code = match e {
            dun::Error::Divergence { .. } | dun::Error::LossNotFinite | dun::Error::NonFiniteGradient(_) => {
                EXIT_NUMERIC
            }
            _ => EXIT_USAGE,
        };
        Self { code, msg: e.to_string() }
    }
}

impl From<config::ConfigError> for CliError {
    fn from(e: config::ConfigError) -> Self {
        Self::usage(format!("config: {e}"))
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::usage(e.to_string())
    }
}

#[derive(Debug, Parser)]
#[command(name = "dun", version, about = "Train and evaluate depth uncertainty networks")]
pub struct Cli {
    /// Replace the config's seed list with this single seed.
    #[arg(long, global = true)]
    pub seed_override: Option<u64>,

    /// Worker threads for running seeds in parallel (falls back to DUN_THREADS).
    #[arg(long, global = true)]
    pub threads: Option<usize>,

    /// Output directory, overriding the config's `out`.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train one model per seed and write traces, checkpoints and reports.
    Train {
        config: PathBuf,
    },
    /// Score a checkpoint on the dataset described by a config.
    Eval {
        checkpoint: PathBuf,
        #[arg(long)]
        config: PathBuf,
        /// Weight depths by the exact posterior on the training rows.
        #[arg(long)]
        exact_posterior: bool,
        /// Predict with the truncated network: argmax, percentile95 or expected.
        #[arg(long)]
        prune: Option<String>,
    },
    /// Train MLL and VI from the same initialisation and plot both.
    CompareObjectives {
        config: PathBuf,
    },
    /// Train fixed-depth networks over a depth range plus one DUN.
    SweepDepth {
        config: PathBuf,
    },
    /// Write a toy dataset to CSV.
    GenData {
        name: String,
        #[arg(long, default_value_t = 300)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        data_seed: u64,
        /// Output file; defaults to `<out>/<name>.csv`.
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

/// Runs a parsed command line and returns the process exit code.
pub fn run(cli: Cli) -> i32 {
    match commands::dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.code
        }
    }
}
