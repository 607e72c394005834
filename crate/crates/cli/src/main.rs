//! `rbsde`: configure, solve and check reflected BSDEs on scenario trees.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod commands;
mod config;
mod error;
mod expr;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};

use crate::commands::Status;
use crate::config::Overrides;
use crate::error::CliError;
use crate::output::{sha256_hex, ManifestInfo, Output};

#[derive(Parser)]
#[command(name = "rbsde", version, about = "Reflected BSDEs driven by a marked point process on scenario trees")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Experiment config (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Result directory (default `results`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Tolerance on kernel probabilities summing to one.
    #[arg(long, global = true)]
    tolerance: Option<f64>,
    #[arg(long = "cap-nodes", global = true)]
    cap_nodes: Option<usize>,
}

#[derive(Subcommand, Clone)]
enum Command {
    /// Check the config and probe the generator's assumptions.
    Validate,
    /// Solve the (reflected) BSDE and write the solution per node.
    Solve {
        /// Also write one row per tree node.
        #[arg(long)]
        dump_tree: bool,
    },
    /// Compare the solver with the enumeration of all stopping rules.
    Snell,
    /// Comparison, Y-bound, U/K moment and truncation checks.
    Check,
    /// Approximation ladder (inf-convolution or truncation).
    Ladder,
    /// European and American indifference prices.
    Price,
    /// Plot-ready CSVs from a results directory (default: --out).
    Plotdata { dir: Option<PathBuf> },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Validate => "validate",
            Command::Solve { .. } => "solve",
            Command::Snell => "snell",
            Command::Check => "check",
            Command::Ladder => "ladder",
            Command::Price => "price",
            Command::Plotdata { .. } => "plotdata",
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let start = Instant::now();
    let command = cli.command.clone();
    if let Command::Plotdata { dir } = &command {
        let dir = dir.clone().or(cli.out.clone()).unwrap_or_else(|| PathBuf::from("results"));
        let out = commands::plotdata(&dir)?;
        println!("plot data written to {}", out.dir().display());
        return out.manifest(&ManifestInfo {
            command: command.name(),
            status: "ok",
            config_path: None,
            config_hash: None,
            seed: None,
            threads: rayon::current_num_threads(),
            wallclock: start.elapsed(),
        });
    }
    let path = cli.config.clone().ok_or_else(|| CliError::Config("--config is required".into()))?;
    let ov = Overrides { out: cli.out, seed: cli.seed, threads: cli.threads, tolerance: cli.tolerance, cap_nodes: cli.cap_nodes };
    let cfg = config::load(&path, &ov)?;
    if let Some(n) = cfg.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Config(format!("cannot set {n} threads: {e}")))?;
    }
    let mut out = Output::create(&cfg.out)?;
    let status = match &command {
        Command::Validate => commands::validate(&cfg, &mut out),
        Command::Solve { dump_tree } => commands::solve(&cfg, &mut out, *dump_tree),
        Command::Snell => commands::snell(&cfg, &mut out),
        Command::Check => commands::check(&cfg, &mut out),
        Command::Ladder => commands::ladder(&cfg, &mut out),
        Command::Price => commands::price(&cfg, &mut out),
        Command::Plotdata { .. } => unreachable!("handled above"),
    };
    let label = match &status {
        Ok(Status::Ok) => "ok",
        Ok(Status::CheckFailed(_)) => "check_failed",
        Err(e) if e.exit_code() == 2 => "numerical_failure",
        Err(_) => "error",
    };
    out.manifest(&ManifestInfo {
        command: command.name(),
        status: label,
        config_path: Some(&path),
        config_hash: Some(sha256_hex(&cfg.bytes)),
        seed: cfg.seed,
        threads: rayon::current_num_threads(),
        wallclock: start.elapsed(),
    })?;
    match status? {
        Status::Ok => Ok(()),
        Status::CheckFailed(why) => Err(CliError::CheckFailed(why)),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
