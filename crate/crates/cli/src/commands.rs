//! The four pipeline commands.

use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};
use twinbeam_core::povm::{
    compare_protocols, reconstruct_povm, self_consistency, GammaSetting, PointEstimate, UncertaintyMethod,
};
use twinbeam_core::sim::{
    simulate_twin_beam_run_with, tally_frequencies, CountsDataset, DatasetMetadata, SettingCounts, SimOptions,
};
use twinbeam_core::state::{
    fit_poisson_mean_with_trials, no_click_noise_floor, no_click_rms_residual, predicted_no_click,
    reconstruct_state_from_counts,
};
use twinbeam_core::{
    column_fidelities, fidelity, forward_joint_probabilities, theoretical_tree_povm, DetectorTreeSpec, PoissonSource,
};

use crate::config::{Reference, RunConfig};
use crate::error::{CliError, CliResult};
use crate::io::{self, read_counts, write_counts, write_json, Sidecar, ToolInfo};
use crate::report::{
    summarize_benchmark, summarize_reconstruction, write_plot_tables, BenchmarkDocument, Diagnostics,
    FidelitySection, InputInfo, NoClickPoint, PovmSection, ReconstructionReport, SolverSummary, StateSection,
};

fn metadata(cfg: &RunConfig) -> DatasetMetadata {
    DatasetMetadata {
        mu: Some(cfg.mu),
        eta_dut: Some(cfg.eta_dut),
        seed: Some(cfg.seed),
        pulses_per_setting: Some(if cfg.noiseless { cfg.noiseless_trials } else { cfg.pulses }),
        simulation_truncation: Some(cfg.sim_truncation),
    }
}

/// Expected counts at `trials` per setting, rounded, with the rounding slack
/// on the most populated cell.
pub fn expected_counts(cfg: &RunConfig, trials: u64) -> CliResult<CountsDataset> {
    let source = PoissonSource::new(cfg.mu)?;
    let tree = DetectorTreeSpec::two_spad(cfg.eta_dut)?;
    let povm = theoretical_tree_povm(&tree, cfg.sim_truncation)?;
    let state = source.distribution(cfg.sim_truncation);
    let mut settings = Vec::with_capacity(cfg.schedule.len());
    for &eta in cfg.schedule.etas() {
        let joint = forward_joint_probabilities(&povm, &state, eta)?;
        let round = |p: f64| (p * trials as f64).round() as u64;
        let mut yes: Vec<u64> = joint.yes.iter().map(|&p| round(p)).collect();
        let mut no: Vec<u64> = joint.no.iter().map(|&p| round(p)).collect();
        let total: u64 = yes.iter().chain(&no).sum();
        let (big_no, big) = joint
            .yes
            .iter()
            .map(|&p| (false, p))
            .chain(joint.no.iter().map(|&p| (true, p)))
            .enumerate()
            .max_by(|a, b| a.1 .1.total_cmp(&b.1 .1))
            .map(|(i, (is_no, _))| (is_no, i % joint.yes.len()))
            .unwrap_or((true, 0));
        let cell = if big_no { &mut no[big] } else { &mut yes[big] };
        *cell = (*cell + trials).checked_sub(total).ok_or_else(|| {
            twinbeam_core::Error::InvalidInput(format!("rounded counts overshoot trials at eta = {eta}"))
        })?;
        settings.push(SettingCounts { eta, trials, yes, no });
    }
    Ok(CountsDataset::new(settings, metadata(cfg))?)
}

/// Simulates (or, with `noiseless`, tabulates) a twin-beam run and writes the
/// counts file and its sidecar. Returns the counts path.
pub fn cmd_simulate(cfg: &RunConfig, out: &Path) -> CliResult<PathBuf> {
    cfg.validate()?;
    let dataset = if cfg.noiseless {
        expected_counts(cfg, cfg.noiseless_trials)?
    } else {
        let mut ds = simulate_twin_beam_run_with(
            &PoissonSource::new(cfg.mu)?,
            &DetectorTreeSpec::two_spad(cfg.eta_dut)?,
            &cfg.schedule,
            cfg.pulses,
            cfg.seed,
            SimOptions {
                truncation: cfg.sim_truncation,
                execution: cfg.execution,
            },
        )?;
        ds.metadata = metadata(cfg);
        ds
    };
    let sidecar = Sidecar {
        tool: ToolInfo::current(),
        seed: cfg.seed,
        config_hash: cfg.hash(),
        noiseless: cfg.noiseless,
        schedule: cfg.schedule.etas().to_vec(),
        metadata: dataset.metadata.clone(),
    };
    write_counts(out, &dataset, &sidecar)?;
    Ok(out.to_path_buf())
}

fn empty_cells(ds: &CountsDataset) -> usize {
    ds.settings()
        .iter()
        .map(|s| s.yes.iter().chain(&s.no).filter(|&&c| c == 0).count())
        .sum()
}

/// Builds the reconstruction report for a counts file without writing it.
pub fn reconstruct_report(cfg: &RunConfig, input: &Path) -> CliResult<ReconstructionReport> {
    cfg.validate()?;
    let bytes = std::fs::read(input).map_err(|e| CliError::io(input, e))?;
    let (ds, _sidecar) = read_counts(input)?;
    let schedule = ds.schedule();
    let p_no = ds.no_click_frequencies();
    let trials = ds.trials();

    let mu_fit = fit_poisson_mean_with_trials(&p_no, schedule, Some(&trials))?;
    let state = reconstruct_state_from_counts(&ds, cfg.truncation, cfg.state_gamma, cfg.solver_options())?;
    let freqs = tally_frequencies(&ds)?;
    let est = reconstruct_povm(&ds, &state.distribution, &cfg.recon_config())?;

    // Generation parameters from the sidecar unless overridden explicitly.
    let reference_mu = match ds.metadata.mu {
        Some(mu) if !cfg.is_explicit("mu") => mu,
        _ => cfg.mu,
    };
    let reference_eta = match ds.metadata.eta_dut {
        Some(eta) if !cfg.is_explicit("eta_dut") => eta,
        _ => cfg.eta_dut,
    };
    let reference_state = PoissonSource::new(reference_mu)?.distribution(cfg.truncation);
    let reference_povm = match cfg.reference {
        Reference::Tree => Some(theoretical_tree_povm(&DetectorTreeSpec::two_spad(reference_eta)?, cfg.truncation)?),
        Reference::None => None,
    };
    let povm_fidelity = reference_povm
        .as_ref()
        .map(|r| column_fidelities(&est.povm, r))
        .transpose()?;

    let consistency = self_consistency(&freqs, &est.povm, &state.distribution)?;
    let consistency_min = consistency
        .iter()
        .filter(|c| c.outcome >= 1)
        .filter_map(|c| c.fidelity)
        .reduce(f64::min);

    let predicted = predicted_no_click(&state.distribution, schedule);
    let no_click = schedule
        .etas()
        .iter()
        .zip(&p_no)
        .zip(&predicted)
        .zip(&trials)
        .map(|(((&eta, &measured), &predicted), &trials)| NoClickPoint {
            eta,
            trials,
            measured,
            predicted,
            poisson_fit: (-mu_fit.mu * eta).exp(),
        })
        .collect();

    let config = cfg.recon_config();
    Ok(ReconstructionReport {
        tool: ToolInfo::current(),
        seed: cfg.seed,
        config_hash: cfg.hash(),
        input: InputInfo {
            path: input.display().to_string(),
            sha256: hex::encode(Sha256::digest(&bytes)),
            settings: ds.settings().len(),
            total_trials: ds.total_trials(),
        },
        state: StateSection {
            truncation: cfg.truncation,
            mu_fit,
            distribution: state.distribution.probs().to_vec(),
            reference_mu,
            reference_distribution: reference_state.probs().to_vec(),
            tail_beyond_truncation: PoissonSource::new(mu_fit.mu.max(f64::MIN_POSITIVE))?.tail_probability(cfg.truncation),
            no_click,
        },
        povm: PovmSection {
            truncation: cfg.truncation,
            elements: est.povm.to_rows(),
            uncertainty: est.uncertainty.clone(),
            gamma: est.gamma,
            gamma_selection: match config.gamma {
                GammaSetting::LCurve => "l-curve".into(),
                GammaSetting::Fixed(_) => "fixed".into(),
            },
            replicates: config.replicates,
            uncertainty_method: match config.uncertainty {
                UncertaintyMethod::DisjointSplits => "splits".into(),
                UncertaintyMethod::Bootstrap => "bootstrap".into(),
            },
            point_estimate: match config.point_estimate {
                PointEstimate::Pooled => "pooled".into(),
                PointEstimate::ReplicateMean => "mean".into(),
            },
            reference_eta_dut: reference_povm.as_ref().map(|_| reference_eta),
            reference: reference_povm.as_ref().map(|p| p.to_rows()),
        },
        fidelities: FidelitySection {
            fidelity_state: fidelity(state.distribution.probs(), reference_state.probs())?,
            povm_fidelity,
            consistency_min,
        },
        consistency,
        diagnostics: Diagnostics {
            state_solver: SolverSummary::from(&state.report),
            povm_solver: SolverSummary::from(&est.report),
            no_click_rms_residual: no_click_rms_residual(&state.distribution, &p_no, schedule)?,
            no_click_noise_floor: no_click_noise_floor(&p_no, &trials),
            empty_cells: empty_cells(&ds),
            l_curve: est.l_curve.clone(),
        },
    })
}

/// Reconstructs state and POVM from `input`, writes the report to `out` and,
/// if enabled, the plot tables beside it.
pub fn cmd_reconstruct(cfg: &RunConfig, input: &Path, out: &Path) -> CliResult<ReconstructionReport> {
    let report = reconstruct_report(cfg, input)?;
    write_json(out, &report)?;
    if cfg.plots {
        write_plot_tables(&report, out, &parent_dir(out))?;
    }
    Ok(report)
}

fn parent_dir(path: &Path) -> PathBuf {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

pub fn cmd_benchmark(cfg: &RunConfig, out: &Path) -> CliResult<BenchmarkDocument> {
    cfg.validate()?;
    let tree = DetectorTreeSpec::two_spad(cfg.eta_dut)?;
    let benchmark = compare_protocols(&tree, &cfg.benchmark_config(), cfg.execution)?;
    let doc = BenchmarkDocument {
        tool: ToolInfo::current(),
        seed: cfg.seed,
        config_hash: cfg.hash(),
        benchmark,
    };
    write_json(out, &doc)?;
    Ok(doc)
}

/// Summarizes a reconstruction or benchmark JSON. Reconstruction plot tables
/// are regenerated into `plot_dir` (default: beside the input).
pub fn cmd_report(input: &Path, plot_dir: Option<&Path>) -> CliResult<String> {
    let value: serde_json::Value = io::read_json(input)?;
    let format_err = |e: serde_json::Error| CliError::Format {
        path: input.to_path_buf(),
        message: e.to_string(),
    };
    if value.get("benchmark").is_some() {
        let doc: BenchmarkDocument = serde_json::from_value(value).map_err(format_err)?;
        return Ok(summarize_benchmark(&doc));
    }
    let report: ReconstructionReport = serde_json::from_value(value).map_err(format_err)?;
    let dir = plot_dir.map(Path::to_path_buf).unwrap_or_else(|| parent_dir(input));
    let written = write_plot_tables(&report, input, &dir)?;
    let mut text = summarize_reconstruction(&report);
    text.push('\n');
    for p in written {
        text.push_str(&format!("wrote {}\n", p.display()));
    }
    Ok(text)
}
