//! Argument parsing and dispatch.

use std::path::PathBuf;

use clap::{Parser, Subcommand};

use crate::commands::{cmd_benchmark, cmd_reconstruct, cmd_report, cmd_simulate};
use crate::config::{ConfigError, RunConfig};
use crate::error::CliResult;
use crate::report::{summarize_benchmark, summarize_reconstruction};

#[derive(Debug, Parser)]
#[command(name = "twinbeam", version, about = "Twin-beam calibration of photon-number-resolving detectors")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,

    /// Flat `key = value` configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output file (`report` takes a directory for plot tables).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<String>,
    /// `linspace:LO:HI:N` or a comma-separated list.
    #[arg(long, global = true)]
    pub schedule: Option<String>,
    #[arg(long, global = true)]
    pub mu: Option<String>,
    #[arg(long = "eta-dut", global = true)]
    pub eta_dut: Option<String>,
    /// Pulses per efficiency setting.
    #[arg(long, global = true)]
    pub pulses: Option<String>,
    /// A number, or `auto` for the L-curve corner.
    #[arg(long, global = true)]
    pub gamma: Option<String>,
    #[arg(long, global = true)]
    pub truncation: Option<String>,
    #[arg(long, global = true)]
    pub replicates: Option<String>,
    /// Any configuration key, applied after the named flags.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub set: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate a run and write a counts file.
    Simulate,
    /// Reconstruct state and POVM from a counts file.
    Reconstruct { input: PathBuf },
    /// Compare heralded and coherent-state calibration at equal budgets.
    Benchmark,
    /// Summarize a report JSON and regenerate its plot tables.
    Report { input: PathBuf },
}

impl Cli {
    /// The file configuration with flags layered on top.
    pub fn resolve_config(&self) -> Result<RunConfig, ConfigError> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::from_file(path)?,
            None => RunConfig::default(),
        };
        let named = [
            ("seed", "--seed", &self.seed),
            ("schedule", "--schedule", &self.schedule),
            ("mu", "--mu", &self.mu),
            ("eta_dut", "--eta-dut", &self.eta_dut),
            ("pulses", "--pulses", &self.pulses),
            ("gamma", "--gamma", &self.gamma),
            ("truncation", "--truncation", &self.truncation),
            ("replicates", "--replicates", &self.replicates),
        ];
        for (key, flag, value) in named {
            if let Some(v) = value {
                cfg.set(key, v, &format!("flag {flag}"))?;
            }
        }
        for assignment in &self.set {
            let Some((key, value)) = assignment.split_once('=') else {
                return Err(ConfigError {
                    origin: "flag --set".into(),
                    field: assignment.clone(),
                    message: "expected KEY=VALUE".into(),
                });
            };
            cfg.set(key.trim(), value, "flag --set")?;
        }
        Ok(cfg)
    }
}

/// Runs the parsed command and returns the text to print.
pub fn run(cli: &Cli) -> CliResult<String> {
    let cfg = cli.resolve_config()?;
    let out = |default: &str| cli.out.clone().unwrap_or_else(|| PathBuf::from(default));
    match &cli.command {
        Command::Simulate => {
            let path = cmd_simulate(&cfg, &out("counts.csv"))?;
            Ok(format!("wrote {}\n", path.display()))
        }
        Command::Reconstruct { input } => {
            let path = out("report.json");
            let report = cmd_reconstruct(&cfg, input, &path)?;
            Ok(format!("{}\nwrote {}\n", summarize_reconstruction(&report), path.display()))
        }
        Command::Benchmark => {
            let path = out("benchmark.json");
            let doc = cmd_benchmark(&cfg, &path)?;
            Ok(format!("{}\nwrote {}\n", summarize_benchmark(&doc), path.display()))
        }
        Command::Report { input } => cmd_report(input, cli.out.as_deref()),
    }
}
