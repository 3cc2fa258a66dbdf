//! Report documents, tidy plot tables and the text summary.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use twinbeam_core::povm::{BenchmarkReport, ConsistencyPoint, LCurve};
use twinbeam_core::solver::SolverReport;
use twinbeam_core::state::PoissonFit;

use crate::error::{CliError, CliResult};
use crate::io::{atomic_write, ToolInfo};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReconstructionReport {
    pub tool: ToolInfo,
    pub seed: u64,
    pub config_hash: String,
    pub input: InputInfo,
    pub state: StateSection,
    pub povm: PovmSection,
    pub fidelities: FidelitySection,
    pub consistency: Vec<ConsistencyPoint>,
    pub diagnostics: Diagnostics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputInfo {
    pub path: String,
    pub sha256: String,
    pub settings: usize,
    pub total_trials: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoClickPoint {
    pub eta: f64,
    pub trials: u64,
    pub measured: f64,
    /// From the reconstructed distribution.
    pub predicted: f64,
    /// `exp(-mu_fit * eta)`.
    pub poisson_fit: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateSection {
    pub truncation: usize,
    pub mu_fit: PoissonFit,
    pub distribution: Vec<f64>,
    /// Mean photon number the state is compared against.
    pub reference_mu: f64,
    pub reference_distribution: Vec<f64>,
    /// Poisson mass beyond the truncation at `mu_fit`.
    pub tail_beyond_truncation: f64,
    pub no_click: Vec<NoClickPoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PovmSection {
    pub truncation: usize,
    /// `elements[n][m]`.
    pub elements: Vec<Vec<f64>>,
    pub uncertainty: Vec<Vec<f64>>,
    pub gamma: f64,
    pub gamma_selection: String,
    pub replicates: usize,
    pub uncertainty_method: String,
    pub point_estimate: String,
    pub reference_eta_dut: Option<f64>,
    pub reference: Option<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FidelitySection {
    /// Reconstructed distribution against the reference Poisson state.
    pub fidelity_state: f64,
    /// Per-column fidelity against the reference POVM.
    pub povm_fidelity: Option<Vec<f64>>,
    /// Smallest self-consistency fidelity over outcomes `n >= 1`.
    pub consistency_min: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverSummary {
    pub converged: bool,
    pub iterations: usize,
    pub objective: f64,
    pub kkt_residual: f64,
    pub min_hessian_eigenvalue: f64,
    pub rank_deficient: bool,
}

impl From<&SolverReport> for SolverSummary {
    fn from(r: &SolverReport) -> Self {
        Self {
            converged: r.converged,
            iterations: r.iterations,
            objective: r.objective,
            kkt_residual: r.kkt_residual,
            min_hessian_eigenvalue: r.min_hessian_eigenvalue,
            rank_deficient: r.rank_deficient,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub state_solver: SolverSummary,
    pub povm_solver: SolverSummary,
    pub no_click_rms_residual: f64,
    pub no_click_noise_floor: f64,
    /// Outcome cells with no counts at some efficiency.
    pub empty_cells: usize,
    pub l_curve: Option<LCurve>,
}

/// Benchmark output: the protocol comparison plus provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkDocument {
    pub tool: ToolInfo,
    pub seed: u64,
    pub config_hash: String,
    pub benchmark: BenchmarkReport,
}

/// `report.json` -> `report.<kind>.csv` inside `dir`.
pub fn plot_path(report: &Path, dir: &Path, kind: &str) -> PathBuf {
    let stem = report.file_stem().and_then(|s| s.to_str()).unwrap_or("report");
    dir.join(format!("{stem}.{kind}.csv"))
}

fn table(header: &[&str], rows: Vec<Vec<String>>) -> CliResult<Vec<u8>> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new());
    let fail = |e: String| CliError::Format {
        path: PathBuf::from("<plot table>"),
        message: e,
    };
    w.write_record(header).map_err(|e| fail(e.to_string()))?;
    for r in rows {
        w.write_record(&r).map_err(|e| fail(e.to_string()))?;
    }
    w.into_inner().map_err(|e| fail(e.to_string()))
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Tidy plot tables keyed by kind: `state`, `no_click`, `povm`, `consistency`.
pub fn plot_tables(r: &ReconstructionReport) -> CliResult<Vec<(&'static str, Vec<u8>)>> {
    let mut state = Vec::new();
    for (m, p) in r.state.distribution.iter().enumerate() {
        state.push(vec![m.to_string(), "reconstructed".into(), p.to_string()]);
    }
    for (m, p) in r.state.reference_distribution.iter().enumerate() {
        state.push(vec![m.to_string(), "reference".into(), p.to_string()]);
    }

    let mut no_click = Vec::new();
    for (series, f) in [
        ("measured", (|p: &NoClickPoint| p.measured) as fn(&NoClickPoint) -> f64),
        ("reconstructed_state", |p| p.predicted),
        ("poisson_fit", |p| p.poisson_fit),
    ] {
        for p in &r.state.no_click {
            let v = f(p);
            no_click.push(vec![p.eta.to_string(), series.into(), v.to_string(), (-v.ln()).to_string()]);
        }
    }

    let mut povm = Vec::new();
    for (n, row) in r.povm.elements.iter().enumerate() {
        for (m, v) in row.iter().enumerate() {
            let sigma = r.povm.uncertainty.get(n).and_then(|u| u.get(m)).copied();
            povm.push(vec![n.to_string(), m.to_string(), "reconstructed".into(), v.to_string(), opt(sigma)]);
        }
    }
    if let Some(reference) = &r.povm.reference {
        for (n, row) in reference.iter().enumerate() {
            for (m, v) in row.iter().enumerate() {
                povm.push(vec![n.to_string(), m.to_string(), "reference".into(), v.to_string(), String::new()]);
            }
        }
    }

    let mut consistency = Vec::new();
    for c in &r.consistency {
        for (series, v) in [
            ("measured_yes", Some(c.measured_yes)),
            ("predicted_yes", Some(c.predicted_yes)),
            ("measured_no", Some(c.measured_no)),
            ("predicted_no", Some(c.predicted_no)),
            ("fidelity", c.fidelity),
        ] {
            consistency.push(vec![c.eta.to_string(), c.outcome.to_string(), series.into(), opt(v)]);
        }
    }

    Ok(vec![
        ("state", table(&["m", "series", "value"], state)?),
        ("no_click", table(&["eta", "series", "p_no", "neg_log_p_no"], no_click)?),
        ("povm", table(&["n", "m", "series", "value", "sigma"], povm)?),
        ("consistency", table(&["eta", "n", "series", "value"], consistency)?),
    ])
}

/// Writes every plot table next to `report` (or into `dir`) and returns the paths.
pub fn write_plot_tables(r: &ReconstructionReport, report: &Path, dir: &Path) -> CliResult<Vec<PathBuf>> {
    let mut written = Vec::new();
    for (kind, bytes) in plot_tables(r)? {
        let path = plot_path(report, dir, kind);
        atomic_write(&path, &bytes)?;
        written.push(path);
    }
    Ok(written)
}

pub fn summarize_reconstruction(r: &ReconstructionReport) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{} {}  seed {}  config {}", r.tool.name, r.tool.version, r.seed, &r.config_hash[..12.min(r.config_hash.len())]);
    let _ = writeln!(s, "input {} ({} settings, {} trials)", r.input.path, r.input.settings, r.input.total_trials);
    let _ = writeln!(s);
    let _ = writeln!(s, "mu = {:.5} +/- {:.5} (reference {})", r.state.mu_fit.mu, r.state.mu_fit.std_error, r.state.reference_mu);
    let _ = writeln!(s, "P(m > {}) at fitted mu: {:.2e}", r.state.truncation, r.state.tail_beyond_truncation);
    let _ = writeln!(s, "  m   reconstructed   reference");
    for (m, (a, b)) in r.state.distribution.iter().zip(&r.state.reference_distribution).enumerate() {
        let _ = writeln!(s, "  {m:<3} {a:<15.6} {b:.6}");
    }
    let _ = writeln!(s, "state fidelity {:.6}", r.fidelities.fidelity_state);
    let _ = writeln!(
        s,
        "no-click rms residual {:.3e} (noise floor {:.3e})",
        r.diagnostics.no_click_rms_residual, r.diagnostics.no_click_noise_floor
    );
    let _ = writeln!(s);
    let _ = writeln!(s, "POVM, gamma = {:.3e} ({}), {} replicates", r.povm.gamma, r.povm.gamma_selection, r.povm.replicates);
    let _ = write!(s, "  n\\m");
    for m in 0..=r.povm.truncation {
        let _ = write!(s, " {m:>17}");
    }
    let _ = writeln!(s);
    for (n, row) in r.povm.elements.iter().enumerate() {
        let _ = write!(s, "  {n:<3}");
        for (m, v) in row.iter().enumerate() {
            let _ = write!(s, " {v:>8.5}+/-{:<6.4}", r.povm.uncertainty[n][m]);
        }
        let _ = writeln!(s);
    }
    if let Some(f) = &r.fidelities.povm_fidelity {
        let eta = r.povm.reference_eta_dut.unwrap_or(f64::NAN);
        let cols: Vec<String> = f.iter().map(|x| format!("{x:.5}")).collect();
        let _ = writeln!(s, "column fidelity vs tree (eta_dut {eta}): [{}]", cols.join(", "));
    }
    if let Some(c) = r.fidelities.consistency_min {
        let _ = writeln!(s, "min self-consistency fidelity (n >= 1): {c:.6}");
    }
    s
}

pub fn summarize_benchmark(d: &BenchmarkDocument) -> String {
    let b = &d.benchmark;
    let mut s = String::new();
    let _ = writeln!(s, "{} {}  seed {}  config {}", d.tool.name, d.tool.version, d.seed, &d.config_hash[..12.min(d.config_hash.len())]);
    let _ = writeln!(
        s,
        "budget {} per arm over {} settings, {} repetitions, eta_dut {}",
        b.config.budget,
        b.config.schedule.len(),
        b.config.repetitions,
        b.eta_dut
    );
    for (name, arm) in [("quantum", &b.quantum), ("classical", &b.classical)] {
        let _ = writeln!(
            s,
            "{name:<10} median MSE {:.4e}  mean {:.4e}  failed {}",
            arm.median_mse,
            arm.mean_mse,
            arm.failed_repetitions.len()
        );
    }
    let _ = writeln!(s, "median MSE ratio quantum/classical: {:.4}", b.mse_ratio);
    s
}
