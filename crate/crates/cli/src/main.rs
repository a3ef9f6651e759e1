//! `steklov`: command-line driver for the mixed Steklov eigenvalue toolkit.
//!
//! Every experiment subcommand writes its artifacts plus a `manifest.json`
//! into one output directory. Exit codes: 0 success, 1 inconclusive,
//! 2 configuration error, 3 numerical failure.

mod commands;
mod config;
mod output;
mod plot;
mod report;

use std::fmt;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::commands::Status;
use crate::config::{DomainConfig, RunConfig};
use crate::output::{input_hash, OutputDir, RunManifest};

/// A failure with its process exit code.
#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    pub fn config(message: impl Into<String>) -> Self {
        CliError { code: 2, message: message.into() }
    }

    pub fn numeric(message: impl Into<String>) -> Self {
        CliError { code: 3, message: message.into() }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<steklov_core::Error> for CliError {
    fn from(e: steklov_core::Error) -> Self {
        use steklov_core::Error::*;
        match e {
            Argument(_) | Partition(_) | Json(_) | NotApplicable(_) => CliError::config(e.to_string()),
            _ => CliError::numeric(e.to_string()),
        }
    }
}

#[derive(Parser)]
#[command(name = "steklov", version, about = "Finite element experiments for mixed Steklov eigenproblems")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args, Clone)]
struct Common {
    /// TOML run configuration; defaults to the reference annulus (0.5, 1), 16 x 128, P1.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; overrides the configured one.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Assemble and solve; write the spectrum and its groups.
    Solve(Common),
    /// Finite-difference checks of the shape derivative formulas.
    DerivCheck(Common),
    /// Pick the best splitting perturbation of one multiple eigenvalue and take a step.
    Split(Common),
    /// Iterated shape simplification of the leading spectrum.
    Simplify(Common),
    /// Iterated coefficient simplification of the leading spectrum.
    Coeff(Common),
    /// Compare with the separation-of-variables annulus spectrum.
    OracleCompare(Common),
    /// Tabulate the tangential identity on W for a multiple eigenvalue.
    WScan(Common),
    /// Summarize finished runs under a directory into summary.md.
    Report {
        /// A run directory or a directory of run directories.
        dir: PathBuf,
    },
}

fn reference_config() -> RunConfig {
    RunConfig::from_toml(
        "[domain]\nfamily = \"annulus\"\nr_inner = 0.5\nr_outer = 1.0\nn_radial = 16\nn_angular = 128\n",
    )
    .expect("reference configuration is valid")
}

fn load_config(common: &Common) -> Result<RunConfig, CliError> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => reference_config(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let DomainConfig::File { path } = &mut cfg.domain {
        // mesh paths are relative to the config file
        if let (true, Some(dir)) = (path.is_relative(), common.config.as_deref().and_then(Path::parent)) {
            *path = dir.join(&*path);
        }
    }
    Ok(cfg)
}

fn output_root(command: &str, common: &Common, cfg: &RunConfig, hash: &str) -> PathBuf {
    if let Some(out) = common.out.clone().or_else(|| cfg.out.clone()) {
        return out;
    }
    let base = std::env::var_os("STEKLOV_OUT_ROOT").map_or_else(|| PathBuf::from("runs"), PathBuf::from);
    base.join(format!("{command}-{}", &hash[..12]))
}

fn now() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true)
}

fn run_experiment(command: &str, common: &Common) -> Result<u8, CliError> {
    let cfg = load_config(common)?;
    // reject a mismatched experiment block before touching the filesystem
    cfg.experiment_for(command)?;
    let hash = input_hash(command, &cfg);
    let root = output_root(command, common, &cfg, &hash);
    let mut out = OutputDir::open(&root)?;
    let started = now();
    let result = commands::run(command, &cfg, &mut out);
    let (status, code, error, summary) = match result {
        Ok(outcome) => {
            let (status, code, error) = match outcome.status {
                Status::Success => ("success", 0, None),
                Status::Inconclusive(msg) => ("inconclusive", 1, Some(msg)),
                Status::Failed(msg) => ("failed", 3, Some(msg)),
            };
            (status, code, error, outcome.summary)
        }
        Err(e) => (if e.code == 2 { "config_error" } else { "numerical_failure" }, e.code, Some(e.message), Default::default()),
    };
    let manifest = RunManifest {
        command: command.to_string(),
        artifact_version: env!("CARGO_PKG_VERSION").to_string(),
        config: cfg,
        input_hash: hash,
        started,
        finished: now(),
        status: status.to_string(),
        exit_code: code as i32,
        error: error.clone(),
        files: out.files().to_vec(),
        summary,
    };
    out.finish(&manifest)?;
    match &error {
        Some(msg) => eprintln!("{command}: {status}: {msg}"),
        None => println!("{command}: {status} -> {}", out.root().display()),
    }
    Ok(code)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Report { dir } => report::write_report(dir).map(|n| {
            println!("report: {n} run(s) -> {}", dir.join("summary.md").display());
            0
        }),
        Command::Solve(c) => run_experiment("solve", c),
        Command::DerivCheck(c) => run_experiment("deriv-check", c),
        Command::Split(c) => run_experiment("split", c),
        Command::Simplify(c) => run_experiment("simplify", c),
        Command::Coeff(c) => run_experiment("coeff", c),
        Command::OracleCompare(c) => run_experiment("oracle-compare", c),
        Command::WScan(c) => run_experiment("w-scan", c),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code)
        }
    }
}
