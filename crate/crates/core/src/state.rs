//! Photon-number distribution of the twin beam from tomographer no-click rates.
//!
//! At efficiency `η` the tomographer stays dark with probability
//! `Σ_m s_m (1-η)^m`, so a schedule of efficiencies yields a Vandermonde-type
//! linear system in the `s_m`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{no_click_powers, EfficiencySchedule, PhotonDistribution, RECONSTRUCTION_TRUNCATION};
use crate::sim::CountsDataset;
use crate::solver::{solve_with, QuadraticProblem, SolverOptions, SolverReport};

/// Result of the linearized Poisson fit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoissonFit {
    pub mu: f64,
    pub std_error: f64,
}

fn check_no_click(p_no: &[f64], schedule: &EfficiencySchedule) -> Result<()> {
    if p_no.len() != schedule.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} no-click frequencies for {} efficiencies",
            p_no.len(),
            schedule.len()
        )));
    }
    for (index, &value) in p_no.iter().enumerate() {
        if !value.is_finite() || value > 1.0 {
            return Err(Error::InvalidInput(format!(
                "no-click frequency {value} at index {index} is not a probability"
            )));
        }
    }
    Ok(())
}

/// Fits `-ln p_no(η) = μ η` through the origin.
///
/// Residuals are weighted by the inverse delta-method variance of `-ln p`,
/// proportional to `p / (1 - p)`; if any `p_no` equals 1 the fit is
/// unweighted. The standard error comes from the residual variance.
pub fn fit_poisson_mean(p_no: &[f64], schedule: &EfficiencySchedule) -> Result<PoissonFit> {
    fit_poisson_mean_with_trials(p_no, schedule, None)
}

/// As [`fit_poisson_mean`], additionally scaling weights by per-setting trials.
pub fn fit_poisson_mean_with_trials(
    p_no: &[f64],
    schedule: &EfficiencySchedule,
    trials: Option<&[u64]>,
) -> Result<PoissonFit> {
    check_no_click(p_no, schedule)?;
    if let Some((index, &value)) = p_no.iter().enumerate().find(|(_, &p)| p <= 0.0) {
        return Err(Error::NonPositiveNoClick { index, value });
    }
    if schedule.len() < 2 {
        return Err(Error::UnderDetermined {
            needed: 2,
            available: schedule.len(),
        });
    }
    if let Some(t) = trials {
        if t.len() != p_no.len() {
            return Err(Error::DimensionMismatch("trials and frequencies differ in length".into()));
        }
    }
    let etas = schedule.etas();
    let y: Vec<f64> = p_no.iter().map(|p| -p.ln()).collect();
    let weights: Vec<f64> = if p_no.iter().any(|&p| p >= 1.0) {
        vec![1.0; p_no.len()]
    } else {
        p_no.iter()
            .enumerate()
            .map(|(i, &p)| p / (1.0 - p) * trials.map_or(1.0, |t| t[i] as f64))
            .collect()
    };
    let sxx: f64 = weights.iter().zip(etas).map(|(w, e)| w * e * e).sum();
    let sxy: f64 = weights.iter().zip(etas).zip(&y).map(|((w, e), y)| w * e * y).sum();
    let mu = sxy / sxx;
    let rss: f64 = weights
        .iter()
        .zip(etas)
        .zip(&y)
        .map(|((w, e), y)| w * (y - mu * e).powi(2))
        .sum();
    let s2 = rss / (p_no.len() - 1) as f64;
    Ok(PoissonFit {
        mu,
        std_error: (s2 / sxx).sqrt(),
    })
}

/// How residuals are weighted.
#[derive(Debug, Clone, PartialEq, Default)]
pub enum Weighting {
    #[default]
    Uniform,
    /// Inverse binomial standard error of each frequency, with the given
    /// per-setting trial counts.
    Binomial(Vec<u64>),
}

/// Per-row weight `1/σ` for a frequency `p` from `trials` events, scaled to
/// the mean trial count so objectives are comparable across dataset sizes.
/// `p` is clamped one count away from 0 and 1 so empty cells keep finite
/// weight.
pub fn binomial_weight(p: f64, trials: u64, mean_trials: f64) -> f64 {
    let t = trials as f64;
    let floor = 1.0 / t;
    let p_eff = p.clamp(floor, (1.0 - floor).max(floor));
    (t / mean_trials).sqrt() / (p_eff * (1.0 - p_eff)).sqrt()
}

#[derive(Debug, Clone, PartialEq)]
pub struct StateReconOptions {
    pub truncation: usize,
    pub weighting: Weighting,
    /// Weight of the first-difference penalty across photon number.
    pub gamma: f64,
    pub solver: SolverOptions,
}

impl Default for StateReconOptions {
    fn default() -> Self {
        Self {
            truncation: RECONSTRUCTION_TRUNCATION,
            weighting: Weighting::Uniform,
            gamma: 0.0,
            solver: SolverOptions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StateEstimate {
    pub distribution: PhotonDistribution,
    pub report: SolverReport,
}

/// First-difference operator over `len` consecutive entries.
pub fn first_difference(len: usize) -> DMatrix<f64> {
    let rows = len.saturating_sub(1);
    DMatrix::from_fn(rows, len, |r, c| {
        if c == r {
            -1.0
        } else if c == r + 1 {
            1.0
        } else {
            0.0
        }
    })
}

/// Builds the constrained least-squares problem for the state.
pub fn assemble_state_problem(
    p_no: &[f64],
    schedule: &EfficiencySchedule,
    options: &StateReconOptions,
) -> Result<QuadraticProblem> {
    check_no_click(p_no, schedule)?;
    if let Some((index, &value)) = p_no.iter().enumerate().find(|(_, &p)| p < 0.0) {
        return Err(Error::NonPositiveNoClick { index, value });
    }
    let m = options.truncation;
    if m < 1 {
        return Err(Error::InvalidInput("truncation must be at least 1".into()));
    }
    if schedule.len() < m + 1 {
        return Err(Error::UnderDetermined {
            needed: m + 1,
            available: schedule.len(),
        });
    }
    let weights: Vec<f64> = match &options.weighting {
        Weighting::Uniform => vec![1.0; p_no.len()],
        Weighting::Binomial(trials) => {
            if trials.len() != p_no.len() || trials.contains(&0) {
                return Err(Error::InvalidInput(
                    "binomial weighting needs a positive trial count per efficiency".into(),
                ));
            }
            let mean = trials.iter().sum::<u64>() as f64 / trials.len() as f64;
            p_no.iter()
                .zip(trials)
                .map(|(&p, &t)| binomial_weight(p, t, mean))
                .collect()
        }
    };
    let rows: Vec<Vec<f64>> = schedule
        .etas()
        .iter()
        .map(|&eta| no_click_powers(eta, m))
        .collect();
    let design = DMatrix::from_fn(rows.len(), m + 1, |r, c| weights[r] * rows[r][c]);
    let target = DVector::from_iterator(p_no.len(), p_no.iter().zip(&weights).map(|(p, w)| p * w));
    let smoothing = (options.gamma > 0.0).then(|| first_difference(m + 1));
    QuadraticProblem::new(design, target, smoothing, options.gamma, vec![(0..=m).collect()])
}

/// Reconstructs `s_0..s_M` from no-click frequencies (unweighted, γ = 0).
pub fn reconstruct_photon_distribution(
    p_no: &[f64],
    schedule: &EfficiencySchedule,
    truncation: usize,
) -> Result<PhotonDistribution> {
    let options = StateReconOptions {
        truncation,
        ..StateReconOptions::default()
    };
    reconstruct_photon_distribution_with(p_no, schedule, &options).map(|e| e.distribution)
}

pub fn reconstruct_photon_distribution_with(
    p_no: &[f64],
    schedule: &EfficiencySchedule,
    options: &StateReconOptions,
) -> Result<StateEstimate> {
    let problem = assemble_state_problem(p_no, schedule, options)?;
    let report = solve_with(&problem, &options.solver)?;
    if !report.converged {
        return Err(Error::NotConverged {
            replicates: vec![],
            detail: format!(
                "state reconstruction stopped after {} iterations with projected-gradient norm {:e}",
                report.iterations, report.kkt_residual
            ),
        });
    }
    let distribution = PhotonDistribution::new(report.solution.clone())?;
    Ok(StateEstimate {
        distribution,
        report,
    })
}

/// Reconstructs the state from a counts dataset with binomial weighting.
pub fn reconstruct_state_from_counts(
    dataset: &CountsDataset,
    truncation: usize,
    gamma: f64,
    solver: SolverOptions,
) -> Result<StateEstimate> {
    let options = StateReconOptions {
        truncation,
        weighting: Weighting::Binomial(dataset.trials()),
        gamma,
        solver,
    };
    reconstruct_photon_distribution_with(&dataset.no_click_frequencies(), dataset.schedule(), &options)
}

/// Model no-click probabilities of `state` over the schedule.
pub fn predicted_no_click(state: &PhotonDistribution, schedule: &EfficiencySchedule) -> Vec<f64> {
    schedule
        .etas()
        .iter()
        .map(|&eta| {
            no_click_powers(eta, state.truncation())
                .iter()
                .zip(state.probs())
                .map(|(a, s)| a * s)
                .sum()
        })
        .collect()
}

/// Root-mean-square difference between predicted and observed no-click rates.
pub fn no_click_rms_residual(
    state: &PhotonDistribution,
    p_no: &[f64],
    schedule: &EfficiencySchedule,
) -> Result<f64> {
    check_no_click(p_no, schedule)?;
    let pred = predicted_no_click(state, schedule);
    let ss: f64 = pred.iter().zip(p_no).map(|(a, b)| (a - b).powi(2)).sum();
    Ok((ss / p_no.len() as f64).sqrt())
}

/// RMS binomial standard error of the observed no-click rates.
pub fn no_click_noise_floor(p_no: &[f64], trials: &[u64]) -> f64 {
    let var: f64 = p_no
        .iter()
        .zip(trials)
        .map(|(&p, &t)| p * (1.0 - p) / t as f64)
        .sum();
    (var / p_no.len() as f64).sqrt()
}
