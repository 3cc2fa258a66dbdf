//! Run configuration: a flat `key = value` file overlaid by command-line flags.
//!
//! ```text
//! # acceptance run
//! mu = 0.5983
//! schedule = linspace:0.01:0.20:20
//! pulses = 10000000
//! gamma = auto
//! ```
//!
//! Later assignments win, so flags applied after the file override it.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use sha2::{Digest, Sha256};
use thiserror::Error;
use twinbeam_core::povm::{BenchmarkConfig, GammaSetting, PointEstimate, ReconConfig, RowWeighting, UncertaintyMethod};
use twinbeam_core::solver::SolverOptions;
use twinbeam_core::{EfficiencySchedule, Execution};

/// A rejected configuration value, located by file line or flag.
#[derive(Debug, Clone, PartialEq, Error)]
#[error("{origin}, field `{field}`: {message}")]
pub struct ConfigError {
    pub origin: String,
    pub field: String,
    pub message: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reference {
    /// Ideal detector tree at `eta_dut`.
    Tree,
    None,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub mu: f64,
    pub eta_dut: f64,
    pub schedule_spec: String,
    pub schedule: EfficiencySchedule,
    pub pulses: u64,
    pub seed: u64,
    pub sim_truncation: usize,
    /// Emit expected counts instead of sampled ones.
    pub noiseless: bool,
    pub noiseless_trials: u64,

    pub truncation: usize,
    pub gamma: GammaSetting,
    pub state_gamma: f64,
    pub replicates: usize,
    pub uncertainty: UncertaintyMethod,
    pub point_estimate: PointEstimate,
    pub weighting: RowWeighting,
    pub tol: f64,
    pub max_iters: usize,
    pub reference: Reference,
    pub plots: bool,
    pub execution: Execution,

    pub bench_mu: f64,
    pub bench_schedule_spec: String,
    pub bench_schedule: EfficiencySchedule,
    pub bench_truncation: usize,
    pub bench_gamma: f64,
    pub budget: u64,
    pub repetitions: usize,

    origins: BTreeMap<String, String>,
}

pub const KEYS: &[&str] = &[
    "mu",
    "eta_dut",
    "schedule",
    "pulses",
    "seed",
    "sim_truncation",
    "noiseless",
    "noiseless_trials",
    "truncation",
    "gamma",
    "state_gamma",
    "replicates",
    "uncertainty",
    "point_estimate",
    "weighting",
    "tol",
    "max_iters",
    "reference",
    "plots",
    "execution",
    "bench_mu",
    "bench_schedule",
    "bench_truncation",
    "bench_gamma",
    "budget",
    "repetitions",
];

impl Default for RunConfig {
    fn default() -> Self {
        let bench = BenchmarkConfig::default();
        Self {
            mu: 0.5983,
            eta_dut: 0.5,
            schedule_spec: "linspace:0.01:0.20:20".into(),
            schedule: EfficiencySchedule::default_grid(),
            pulses: 1_000_000,
            seed: 42,
            sim_truncation: twinbeam_core::SIMULATION_TRUNCATION,
            noiseless: false,
            noiseless_trials: 1_000_000_000_000_000,
            truncation: twinbeam_core::RECONSTRUCTION_TRUNCATION,
            gamma: GammaSetting::LCurve,
            state_gamma: 0.0,
            replicates: 30,
            uncertainty: UncertaintyMethod::DisjointSplits,
            point_estimate: PointEstimate::Pooled,
            weighting: RowWeighting::Binomial,
            tol: twinbeam_core::solver::DEFAULT_TOL,
            max_iters: twinbeam_core::solver::DEFAULT_MAX_ITERS,
            reference: Reference::Tree,
            plots: true,
            execution: Execution::default(),
            bench_mu: bench.mu,
            bench_schedule_spec: "linspace:0.05:0.95:20".into(),
            bench_schedule: bench.schedule,
            bench_truncation: bench.truncation,
            bench_gamma: bench.gamma,
            budget: bench.budget,
            repetitions: bench.repetitions,
            origins: BTreeMap::new(),
        }
    }
}

/// Expands `linspace:LO:HI:N` or a comma-separated list.
pub fn parse_schedule(spec: &str) -> Result<EfficiencySchedule, String> {
    let spec = spec.trim();
    if let Some(rest) = spec.strip_prefix("linspace:") {
        let parts: Vec<&str> = rest.split(':').collect();
        if parts.len() != 3 {
            return Err(format!("expected linspace:LO:HI:N, got `{spec}`"));
        }
        let lo = parse_f64(parts[0])?;
        let hi = parse_f64(parts[1])?;
        let n = parts[2]
            .trim()
            .parse::<usize>()
            .map_err(|_| format!("`{}` is not a count", parts[2]))?;
        EfficiencySchedule::linspace(lo, hi, n).map_err(|e| e.to_string())
    } else {
        let etas = spec.split(',').map(parse_f64).collect::<Result<Vec<_>, _>>()?;
        EfficiencySchedule::new(etas).map_err(|e| e.to_string())
    }
}

fn parse_f64(s: &str) -> Result<f64, String> {
    let v: f64 = s.trim().parse().map_err(|_| format!("`{}` is not a number", s.trim()))?;
    if v.is_finite() {
        Ok(v)
    } else {
        Err(format!("`{}` is not finite", s.trim()))
    }
}

fn parse_count<T: std::str::FromStr>(s: &str) -> Result<T, String> {
    let s = s.trim();
    // Accept `1e7` style counts as long as they are exact integers.
    if let Ok(v) = s.parse::<T>() {
        return Ok(v);
    }
    let f: f64 = s.parse().map_err(|_| format!("`{s}` is not an integer"))?;
    if f.fract() != 0.0 || !(0.0..=9.007_199_254_740_992e15).contains(&f) {
        return Err(format!("`{s}` is not a non-negative integer"));
    }
    format!("{}", f as u64).parse::<T>().map_err(|_| format!("`{s}` is out of range"))
}

fn parse_bool(s: &str) -> Result<bool, String> {
    match s.trim() {
        "true" | "yes" | "1" | "on" => Ok(true),
        "false" | "no" | "0" | "off" => Ok(false),
        other => Err(format!("`{other}` is not a boolean")),
    }
}

fn parse_unit(s: &str) -> Result<f64, String> {
    let v = parse_f64(s)?;
    if (0.0..=1.0).contains(&v) {
        Ok(v)
    } else {
        Err(format!("{v} is outside [0, 1]"))
    }
}

fn parse_nonneg(s: &str) -> Result<f64, String> {
    let v = parse_f64(s)?;
    if v >= 0.0 {
        Ok(v)
    } else {
        Err(format!("{v} is negative"))
    }
}

impl RunConfig {
    /// Assigns one key. `origin` describes where the value came from and is
    /// echoed in diagnostics.
    pub fn set(&mut self, key: &str, value: &str, origin: &str) -> Result<(), ConfigError> {
        let err = |message: String| ConfigError {
            origin: origin.to_string(),
            field: key.to_string(),
            message,
        };
        let v = value.trim();
        match key {
            "mu" => self.mu = parse_nonneg(v).map_err(err)?,
            "eta_dut" => self.eta_dut = parse_unit(v).map_err(err)?,
            "schedule" => {
                self.schedule = parse_schedule(v).map_err(err)?;
                self.schedule_spec = v.to_string();
            }
            "pulses" => self.pulses = parse_count(v).map_err(err)?,
            "seed" => self.seed = parse_count(v).map_err(err)?,
            "sim_truncation" => self.sim_truncation = parse_count(v).map_err(err)?,
            "noiseless" => self.noiseless = parse_bool(v).map_err(err)?,
            "noiseless_trials" => self.noiseless_trials = parse_count(v).map_err(err)?,
            "truncation" => self.truncation = parse_count(v).map_err(err)?,
            "gamma" => {
                self.gamma = match v {
                    "auto" | "lcurve" => GammaSetting::LCurve,
                    _ => GammaSetting::Fixed(parse_nonneg(v).map_err(err)?),
                }
            }
            "state_gamma" => self.state_gamma = parse_nonneg(v).map_err(err)?,
            "replicates" => self.replicates = parse_count(v).map_err(err)?,
            "uncertainty" => {
                self.uncertainty = match v {
                    "splits" => UncertaintyMethod::DisjointSplits,
                    "bootstrap" => UncertaintyMethod::Bootstrap,
                    _ => return Err(err(format!("expected `splits` or `bootstrap`, got `{v}`"))),
                }
            }
            "point_estimate" => {
                self.point_estimate = match v {
                    "pooled" => PointEstimate::Pooled,
                    "mean" => PointEstimate::ReplicateMean,
                    _ => return Err(err(format!("expected `pooled` or `mean`, got `{v}`"))),
                }
            }
            "weighting" => {
                self.weighting = match v {
                    "binomial" => RowWeighting::Binomial,
                    "uniform" => RowWeighting::Uniform,
                    _ => return Err(err(format!("expected `binomial` or `uniform`, got `{v}`"))),
                }
            }
            "tol" => self.tol = parse_nonneg(v).map_err(err)?,
            "max_iters" => self.max_iters = parse_count(v).map_err(err)?,
            "reference" => {
                self.reference = match v {
                    "tree" => Reference::Tree,
                    "none" => Reference::None,
                    _ => return Err(err(format!("expected `tree` or `none`, got `{v}`"))),
                }
            }
            "plots" => self.plots = parse_bool(v).map_err(err)?,
            "execution" => {
                self.execution = match v {
                    "parallel" => Execution::Parallel,
                    "sequential" => Execution::Sequential,
                    _ => return Err(err(format!("expected `parallel` or `sequential`, got `{v}`"))),
                }
            }
            "bench_mu" => self.bench_mu = parse_nonneg(v).map_err(err)?,
            "bench_schedule" => {
                self.bench_schedule = parse_schedule(v).map_err(err)?;
                self.bench_schedule_spec = v.to_string();
            }
            "bench_truncation" => self.bench_truncation = parse_count(v).map_err(err)?,
            "bench_gamma" => self.bench_gamma = parse_nonneg(v).map_err(err)?,
            "budget" => self.budget = parse_count(v).map_err(err)?,
            "repetitions" => self.repetitions = parse_count(v).map_err(err)?,
            _ => return Err(err("unknown key".into())),
        }
        self.origins.insert(key.to_string(), origin.to_string());
        Ok(())
    }

    /// Applies every assignment in `text`; `name` labels diagnostics.
    pub fn apply_text(&mut self, text: &str, name: &str) -> Result<(), ConfigError> {
        for (i, raw) in text.lines().enumerate() {
            let origin = format!("{name} line {}", i + 1);
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(ConfigError {
                    origin,
                    field: line.to_string(),
                    message: "expected `key = value`".into(),
                });
            };
            self.set(key.trim(), value, &origin)?;
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError {
            origin: path.display().to_string(),
            field: "-".into(),
            message: e.to_string(),
        })?;
        let mut cfg = Self::default();
        cfg.apply_text(&text, &path.display().to_string())?;
        Ok(cfg)
    }

    /// True if `key` was assigned by a file or flag rather than defaulted.
    pub fn is_explicit(&self, key: &str) -> bool {
        self.origins.contains_key(key)
    }

    fn origin(&self, key: &str) -> String {
        self.origins.get(key).cloned().unwrap_or_else(|| "default".into())
    }

    fn reject(&self, key: &str, message: &str) -> ConfigError {
        ConfigError {
            origin: self.origin(key),
            field: key.into(),
            message: message.into(),
        }
    }

    /// Cross-field checks run before any command.
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.pulses == 0 {
            return Err(self.reject("pulses", "pulses per setting must be at least 1"));
        }
        if self.mu <= 0.0 {
            return Err(self.reject("mu", "mean photon number must be positive"));
        }
        if self.truncation == 0 {
            return Err(self.reject("truncation", "must be at least 1"));
        }
        if self.sim_truncation == 0 {
            return Err(self.reject("sim_truncation", "must be at least 1"));
        }
        if self.replicates == 0 {
            return Err(self.reject("replicates", "must be at least 1"));
        }
        if self.noiseless_trials == 0 {
            return Err(self.reject("noiseless_trials", "must be at least 1"));
        }
        if self.max_iters == 0 {
            return Err(self.reject("max_iters", "must be at least 1"));
        }
        if self.tol <= 0.0 {
            return Err(self.reject("tol", "must be positive"));
        }
        if self.bench_mu <= 0.0 {
            return Err(self.reject("bench_mu", "mean photon number must be positive"));
        }
        if self.bench_truncation == 0 {
            return Err(self.reject("bench_truncation", "must be at least 1"));
        }
        if self.repetitions == 0 {
            return Err(self.reject("repetitions", "must be at least 1"));
        }
        if self.budget < self.bench_schedule.len() as u64 {
            return Err(self.reject("budget", "must cover at least one pulse per setting"));
        }
        Ok(())
    }

    /// Every effective value, one `key = value` line each, in `KEYS` order.
    pub fn canonical(&self) -> String {
        let mut out = String::new();
        for key in KEYS {
            let value = match *key {
                "mu" => self.mu.to_string(),
                "eta_dut" => self.eta_dut.to_string(),
                "schedule" => format!("{:?}", self.schedule.etas()),
                "pulses" => self.pulses.to_string(),
                "seed" => self.seed.to_string(),
                "sim_truncation" => self.sim_truncation.to_string(),
                "noiseless" => self.noiseless.to_string(),
                "noiseless_trials" => self.noiseless_trials.to_string(),
                "truncation" => self.truncation.to_string(),
                "gamma" => match self.gamma {
                    GammaSetting::LCurve => "auto".into(),
                    GammaSetting::Fixed(g) => g.to_string(),
                },
                "state_gamma" => self.state_gamma.to_string(),
                "replicates" => self.replicates.to_string(),
                "uncertainty" => match self.uncertainty {
                    UncertaintyMethod::DisjointSplits => "splits".into(),
                    UncertaintyMethod::Bootstrap => "bootstrap".into(),
                },
                "point_estimate" => match self.point_estimate {
                    PointEstimate::Pooled => "pooled".into(),
                    PointEstimate::ReplicateMean => "mean".into(),
                },
                "weighting" => match self.weighting {
                    RowWeighting::Binomial => "binomial".into(),
                    RowWeighting::Uniform => "uniform".into(),
                },
                "tol" => self.tol.to_string(),
                "max_iters" => self.max_iters.to_string(),
                "reference" => match self.reference {
                    Reference::Tree => "tree".into(),
                    Reference::None => "none".into(),
                },
                "plots" => self.plots.to_string(),
                // Execution mode never changes results, so it stays out of the hash.
                "execution" => continue,
                "bench_mu" => self.bench_mu.to_string(),
                "bench_schedule" => format!("{:?}", self.bench_schedule.etas()),
                "bench_truncation" => self.bench_truncation.to_string(),
                "bench_gamma" => self.bench_gamma.to_string(),
                "budget" => self.budget.to_string(),
                "repetitions" => self.repetitions.to_string(),
                _ => unreachable!("key table out of sync"),
            };
            let _ = writeln!(out, "{key} = {value}");
        }
        out
    }

    /// SHA-256 of [`RunConfig::canonical`], hex encoded.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.canonical().as_bytes()))
    }

    pub fn recon_config(&self) -> ReconConfig {
        ReconConfig {
            truncation: self.truncation,
            gamma: self.gamma,
            solver: self.solver_options(),
            replicates: self.replicates,
            uncertainty: self.uncertainty,
            point_estimate: self.point_estimate,
            weighting: self.weighting,
            seed: self.seed,
            execution: self.execution,
        }
    }

    pub fn solver_options(&self) -> SolverOptions {
        SolverOptions {
            tol: self.tol,
            max_iters: self.max_iters,
            initial: None,
        }
    }

    pub fn benchmark_config(&self) -> BenchmarkConfig {
        BenchmarkConfig {
            mu: self.bench_mu,
            schedule: self.bench_schedule.clone(),
            truncation: self.bench_truncation,
            gamma: self.bench_gamma,
            budget: self.budget,
            repetitions: self.repetitions,
            seed: self.seed,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.schedule, parse_schedule(&cfg.schedule_spec).unwrap());
        assert_eq!(cfg.bench_schedule, parse_schedule(&cfg.bench_schedule_spec).unwrap());
    }

    #[test]
    fn file_diagnostics_carry_line_and_field() {
        let mut cfg = RunConfig::default();
        let e = cfg.apply_text("# header\nmu = 0.6\n\neta_dut = 1.5\n", "run.cfg").unwrap_err();
        assert_eq!(e.origin, "run.cfg line 4");
        assert_eq!(e.field, "eta_dut");
        assert_eq!(cfg.mu, 0.6);
        let e = cfg.apply_text("bogus = 1", "run.cfg").unwrap_err();
        assert_eq!(e.message, "unknown key");
        let e = cfg.apply_text("pulses 5", "run.cfg").unwrap_err();
        assert_eq!(e.origin, "run.cfg line 1");
    }

    #[test]
    fn zero_pulses_fail_validation_at_their_origin() {
        let mut cfg = RunConfig::default();
        cfg.apply_text("pulses = 0", "a.cfg").unwrap();
        let e = cfg.validate().unwrap_err();
        assert_eq!((e.origin.as_str(), e.field.as_str()), ("a.cfg line 1", "pulses"));
    }

    #[test]
    fn schedules_and_counts_parse() {
        let s = parse_schedule("0.1, 0.2,0.3").unwrap();
        assert_eq!(s.etas(), &[0.1, 0.2, 0.3]);
        assert!(parse_schedule("linspace:0.1:0.2").is_err());
        assert!(parse_schedule("0.3,0.2").is_err());
        assert_eq!(parse_count::<u64>("1e7").unwrap(), 10_000_000);
        assert!(parse_count::<u64>("1.5").is_err());
        assert!(parse_count::<u64>("-3").is_err());
    }

    #[test]
    fn hash_tracks_values_but_not_execution() {
        let a = RunConfig::default();
        let mut b = RunConfig::default();
        b.set("execution", "sequential", "flag").unwrap();
        assert_eq!(a.hash(), b.hash());
        b.set("seed", "43", "flag").unwrap();
        assert_ne!(a.hash(), b.hash());
        let mut c = RunConfig::default();
        c.set("schedule", "linspace:0.01:0.2:20", "flag").unwrap();
        assert_eq!(a.hash(), c.hash());
    }
}
