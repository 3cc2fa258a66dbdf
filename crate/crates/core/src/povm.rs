//! POVM reconstruction from twin-beam data, the coherent-probe alternative,
//! and the protocol benchmark.
//!
//! Unknowns are `x[n (M+1) + m] = Π_{nm}`. Each column `m` is a simplex group,
//! so positivity and completeness hold by construction.

use nalgebra::{DMatrix, DVector};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::{map_indexed, Execution};
use crate::model::{
    coherent_response, column_fidelities, forward_joint_probabilities, no_click_powers,
    poisson_pmf, theoretical_tree_povm, DetectorTreeSpec, EfficiencySchedule, JointProbabilities,
    PhotonDistribution, PoissonSource, PovmMatrix, RECONSTRUCTION_TRUNCATION,
};
use crate::sim::{
    bootstrap_coherent, bootstrap_counts, simulate_coherent_run_with, simulate_twin_beam_run_with,
    split_coherent, split_counts, tally_frequencies, CoherentDataset, CountsDataset,
    FrequencyRow, FrequencyTable, SimOptions,
};
use crate::solver::{solve_with, QuadraticProblem, SolverOptions, SolverReport};
use crate::state::{binomial_weight, first_difference};

/// Smoothing weight: fixed, or chosen at the L-curve corner of the pooled data.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum GammaSetting {
    Fixed(f64),
    LCurve,
}

/// How replicate datasets are formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum UncertaintyMethod {
    DisjointSplits,
    Bootstrap,
}

/// Which reconstruction is reported as the POVM.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PointEstimate {
    /// Fit of the full dataset; replicates only supply error bars.
    Pooled,
    /// Elementwise mean of the replicate fits.
    ReplicateMean,
}

/// Residual weighting of the least-squares rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RowWeighting {
    /// Inverse binomial standard error, one-count floor for empty cells.
    Binomial,
    Uniform,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReconConfig {
    pub truncation: usize,
    pub gamma: GammaSetting,
    pub solver: SolverOptions,
    pub replicates: usize,
    pub uncertainty: UncertaintyMethod,
    pub point_estimate: PointEstimate,
    pub weighting: RowWeighting,
    /// Seed for forming replicates.
    pub seed: u64,
    pub execution: Execution,
}

impl Default for ReconConfig {
    fn default() -> Self {
        Self {
            truncation: RECONSTRUCTION_TRUNCATION,
            gamma: GammaSetting::LCurve,
            solver: SolverOptions::default(),
            replicates: 30,
            uncertainty: UncertaintyMethod::DisjointSplits,
            point_estimate: PointEstimate::Pooled,
            weighting: RowWeighting::Binomial,
            seed: 0,
            execution: Execution::default(),
        }
    }
}

impl ReconConfig {
    pub fn validate(&self) -> Result<()> {
        if self.replicates < 1 {
            return Err(Error::InvalidInput("replicates must be at least 1".into()));
        }
        if self.truncation < 1 {
            return Err(Error::InvalidInput("truncation must be at least 1".into()));
        }
        if let GammaSetting::Fixed(g) = self.gamma {
            if !g.is_finite() || g < 0.0 {
                return Err(Error::OutOfRange {
                    name: "gamma",
                    value: g,
                    range: "[0, inf)",
                });
            }
        }
        Ok(())
    }

    fn with_gamma(&self, gamma: f64) -> Self {
        Self {
            gamma: GammaSetting::Fixed(gamma),
            ..self.clone()
        }
    }

    fn fixed_gamma(&self) -> f64 {
        match self.gamma {
            GammaSetting::Fixed(g) => g,
            GammaSetting::LCurve => 0.0,
        }
    }
}

/// A reconstructed POVM with elementwise 1σ spreads.
#[derive(Debug, Clone, PartialEq)]
pub struct PovmEstimate {
    pub povm: PovmMatrix,
    /// `uncertainty[n][m]`, the standard deviation over replicates.
    pub uncertainty: Vec<Vec<f64>>,
    pub gamma: f64,
    pub replicates: Vec<PovmMatrix>,
    pub report: SolverReport,
    /// The sweep behind an automatic `γ`.
    pub l_curve: Option<LCurve>,
}

/// First differences along `m` within each outcome row.
pub fn povm_smoothing(n_outcomes: usize, truncation: usize) -> DMatrix<f64> {
    let d = first_difference(truncation + 1);
    let cols = truncation + 1;
    let mut out = DMatrix::zeros(n_outcomes * d.nrows(), n_outcomes * cols);
    for n in 0..n_outcomes {
        out.view_mut((n * d.nrows(), n * cols), (d.nrows(), cols))
            .copy_from(&d);
    }
    out
}

fn column_groups(n_outcomes: usize, truncation: usize) -> Vec<Vec<usize>> {
    (0..=truncation)
        .map(|m| (0..n_outcomes).map(|n| n * (truncation + 1) + m).collect())
        .collect()
}

fn row_weights(targets: &[f64], trials: &[u64], weighting: RowWeighting) -> Vec<f64> {
    match weighting {
        RowWeighting::Uniform => vec![1.0; targets.len()],
        RowWeighting::Binomial => {
            let mean = trials.iter().sum::<u64>() as f64 / trials.len() as f64;
            targets
                .iter()
                .zip(trials)
                .map(|(&p, &t)| binomial_weight(p, t, mean))
                .collect()
        }
    }
}

fn build_problem(
    coefficients: Vec<Vec<f64>>,
    targets: Vec<f64>,
    trials: Vec<u64>,
    n_outcomes: usize,
    truncation: usize,
    config: &ReconConfig,
) -> Result<QuadraticProblem> {
    let weights = row_weights(&targets, &trials, config.weighting);
    let cols = n_outcomes * (truncation + 1);
    let design = DMatrix::from_fn(coefficients.len(), cols, |r, c| weights[r] * coefficients[r][c]);
    let target = DVector::from_iterator(targets.len(), targets.iter().zip(&weights).map(|(b, w)| b * w));
    let gamma = config.fixed_gamma();
    let smoothing = (gamma > 0.0).then(|| povm_smoothing(n_outcomes, truncation));
    QuadraticProblem::new(design, target, smoothing, gamma, column_groups(n_outcomes, truncation))
}

/// Builds the least-squares problem matching observed `p_exp(n, yes|no)`
/// against the forward model for every efficiency and outcome.
///
/// Rows are ordered by efficiency, then outcome, then (yes, no). Empty cells
/// keep their row with target 0.
pub fn assemble_povm_problem(
    freqs: &FrequencyTable,
    state: &PhotonDistribution,
    schedule: &EfficiencySchedule,
    config: &ReconConfig,
) -> Result<QuadraticProblem> {
    config.validate()?;
    let m_max = config.truncation;
    if state.truncation() != m_max {
        return Err(Error::DimensionMismatch(format!(
            "state truncation {} differs from reconstruction truncation {m_max}",
            state.truncation()
        )));
    }
    let rows = rows_for_schedule(freqs, schedule)?;
    let n_outcomes = freqs.n_outcomes();
    let cols = n_outcomes * (m_max + 1);
    let s = state.probs();

    let mut coefficients = Vec::with_capacity(rows.len() * n_outcomes * 2);
    let mut targets = Vec::with_capacity(coefficients.capacity());
    let mut trials = Vec::with_capacity(coefficients.capacity());
    for row in rows {
        let q = no_click_powers(row.eta, m_max);
        for n in 0..n_outcomes {
            let mut yes = vec![0.0; cols];
            let mut no = vec![0.0; cols];
            for m in 0..=m_max {
                yes[n * (m_max + 1) + m] = s[m] * (1.0 - q[m]);
                no[n * (m_max + 1) + m] = s[m] * q[m];
            }
            coefficients.push(yes);
            targets.push(row.p_exp_yes(n));
            trials.push(row.trials);
            coefficients.push(no);
            targets.push(row.p_exp_no(n));
            trials.push(row.trials);
        }
    }
    build_problem(coefficients, targets, trials, n_outcomes, m_max, config)
}

fn rows_for_schedule<'a>(
    freqs: &'a FrequencyTable,
    schedule: &EfficiencySchedule,
) -> Result<Vec<&'a FrequencyRow>> {
    schedule
        .etas()
        .iter()
        .map(|&eta| {
            freqs
                .rows
                .iter()
                .find(|r| (r.eta - eta).abs() <= 1e-12)
                .ok_or_else(|| {
                    Error::InvalidInput(format!("no frequency row for efficiency {eta}"))
                })
        })
        .collect()
}

/// Builds the coherent-probe problem: `f(n | α²) ≈ Σ_m Π_{nm} P(m; α²)`
/// with the Poisson weights renormalized over `0..=M`, as in
/// [`coherent_response`].
pub fn assemble_classical_problem(
    dataset: &CoherentDataset,
    n_outcomes: usize,
    config: &ReconConfig,
) -> Result<QuadraticProblem> {
    config.validate()?;
    let m_max = config.truncation;
    let cols = n_outcomes * (m_max + 1);
    let mut coefficients = Vec::new();
    let mut targets = Vec::new();
    let mut trials = Vec::new();
    for s in &dataset.settings {
        if s.counts.len() != n_outcomes {
            return Err(Error::DimensionMismatch(format!(
                "intensity {} has {} outcomes, expected {n_outcomes}",
                s.alpha_sq,
                s.counts.len()
            )));
        }
        if s.trials == 0 {
            return Err(Error::InvalidInput(format!("intensity {} has no trials", s.alpha_sq)));
        }
        if !s.alpha_sq.is_finite() || s.alpha_sq < 0.0 {
            return Err(Error::OutOfRange {
                name: "alpha_sq",
                value: s.alpha_sq,
                range: "[0, inf)",
            });
        }
        let mut pmf = poisson_pmf(s.alpha_sq, m_max);
        let total: f64 = pmf.iter().sum();
        pmf.iter_mut().for_each(|p| *p /= total);
        for n in 0..n_outcomes {
            let mut row = vec![0.0; cols];
            row[n * (m_max + 1)..(n + 1) * (m_max + 1)].copy_from_slice(&pmf);
            coefficients.push(row);
            targets.push(s.counts[n] as f64 / s.trials as f64);
            trials.push(s.trials);
        }
    }
    build_problem(coefficients, targets, trials, n_outcomes, m_max, config)
}

fn solve_povm(problem: &QuadraticProblem, config: &ReconConfig, n_outcomes: usize) -> Result<(PovmMatrix, SolverReport)> {
    let report = solve_with(problem, &config.solver)?;
    let povm = PovmMatrix::from_flat(&report.solution, n_outcomes, config.truncation)?;
    Ok((povm, report))
}

fn not_converged(report: &SolverReport) -> Error {
    Error::NotConverged {
        replicates: vec![],
        detail: format!(
            "pooled fit stopped after {} iterations with projected-gradient norm {:e}",
            report.iterations, report.kkt_residual
        ),
    }
}

/// One point of an L-curve sweep.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LCurvePoint {
    pub gamma: f64,
    /// `||A x - b||`
    pub residual_norm: f64,
    /// `||D x||`
    pub penalty_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LCurve {
    pub points: Vec<LCurvePoint>,
    /// Index of the corner point.
    pub corner: usize,
}

impl LCurve {
    pub fn corner_gamma(&self) -> f64 {
        self.points[self.corner].gamma
    }
}

/// Default sweep: 31 values, log-spaced over `[1e-10, 1]`.
pub fn default_gamma_grid() -> Vec<f64> {
    (0..=30).map(|k| 10f64.powf(-10.0 + k as f64 / 3.0)).collect()
}

/// Sweeps `gammas`, solving the problem produced by `build` at each value,
/// and locates the corner of the curve `(log ||Ax-b||, log ||Dx||)`.
///
/// Both axes are rescaled to `[0, 1]` over the sweep; the corner is the point
/// lying farthest below the chord joining the two ends. Unlike a curvature
/// estimate this is not fooled by the flat stretch at small `γ`, where the
/// constraints rather than the penalty decide the solution.
pub fn l_curve<F>(gammas: &[f64], execution: Execution, solver: &SolverOptions, build: F) -> Result<LCurve>
where
    F: Fn(f64) -> Result<QuadraticProblem> + Sync + Send,
{
    if gammas.len() < 3 || gammas.iter().any(|&g| !(g.is_finite() && g > 0.0)) {
        return Err(Error::InvalidInput(
            "an L-curve needs at least three positive gamma values".into(),
        ));
    }
    if gammas.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidInput("gamma grid must be increasing".into()));
    }
    let points = map_indexed(execution, gammas.len(), |i| {
        let problem = build(gammas[i])?;
        let report = solve_with(&problem, solver)?;
        Ok(LCurvePoint {
            gamma: gammas[i],
            residual_norm: problem.residual_norm_sq(&report.solution).sqrt(),
            penalty_norm: problem.penalty_norm_sq(&report.solution).sqrt(),
        })
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;

    let x: Vec<f64> = points.iter().map(|p| p.residual_norm.max(1e-300).ln()).collect();
    let y: Vec<f64> = points.iter().map(|p| p.penalty_norm.max(1e-300).ln()).collect();
    let last = points.len() - 1;
    let (dx, dy) = (x[last] - x[0], y[0] - y[last]);
    let corner = if dx <= 0.0 || dy <= 0.0 {
        // Smoothing has no visible effect over the sweep.
        0
    } else {
        (0..=last)
            .map(|i| (i, 1.0 - (x[i] - x[0]) / dx - (y[i] - y[last]) / dy))
            .fold((0, f64::NEG_INFINITY), |best, cur| if cur.1 > best.1 { cur } else { best })
            .0
    };
    Ok(LCurve { points, corner })
}

fn resolve_gamma<F>(config: &ReconConfig, build: F) -> Result<(f64, Option<LCurve>)>
where
    F: Fn(f64) -> Result<QuadraticProblem> + Sync + Send,
{
    match config.gamma {
        GammaSetting::Fixed(g) => Ok((g, None)),
        GammaSetting::LCurve => {
            let curve = l_curve(&default_gamma_grid(), config.execution, &config.solver, build)?;
            Ok((curve.corner_gamma(), Some(curve)))
        }
    }
}

fn combine(
    pooled: (PovmMatrix, SolverReport),
    replicates: Vec<Result<(PovmMatrix, SolverReport)>>,
    (gamma, l_curve): (f64, Option<LCurve>),
    config: &ReconConfig,
) -> Result<PovmEstimate> {
    let mut failed = Vec::new();
    let mut reasons = Vec::new();
    let mut fits = Vec::new();
    for (i, r) in replicates.into_iter().enumerate() {
        match r {
            Ok((povm, report)) if report.converged => fits.push(povm),
            Ok((_, report)) => {
                failed.push(i);
                reasons.push(format!(
                    "replicate {i}: projected-gradient norm {:e} after {} iterations",
                    report.kkt_residual, report.iterations
                ));
            }
            Err(e) => {
                failed.push(i);
                reasons.push(format!("replicate {i}: {e}"));
            }
        }
    }
    if !failed.is_empty() {
        return Err(Error::NotConverged {
            detail: format!(
                "{} of {} replicate fits failed ({})",
                failed.len(),
                config.replicates,
                reasons.join("; ")
            ),
            replicates: failed,
        });
    }
    let (n_out, m_max) = (pooled.0.n_outcomes(), pooled.0.truncation());
    let r = fits.len() as f64;
    let mut mean = vec![vec![0.0; m_max + 1]; n_out];
    for f in &fits {
        for (n, row) in mean.iter_mut().enumerate() {
            for (m, v) in row.iter_mut().enumerate() {
                *v += f.get(n, m) / r;
            }
        }
    }
    let uncertainty = (0..n_out)
        .map(|n| {
            (0..=m_max)
                .map(|m| {
                    if fits.len() < 2 {
                        return 0.0;
                    }
                    let ss: f64 = fits.iter().map(|f| (f.get(n, m) - mean[n][m]).powi(2)).sum();
                    (ss / (r - 1.0)).sqrt()
                })
                .collect()
        })
        .collect();
    let povm = match config.point_estimate {
        PointEstimate::Pooled => pooled.0,
        PointEstimate::ReplicateMean => {
            let flat: Vec<f64> = mean.iter().flatten().copied().collect();
            PovmMatrix::from_flat(&flat, n_out, m_max)?
        }
    };
    Ok(PovmEstimate {
        povm,
        uncertainty,
        gamma,
        replicates: fits,
        report: pooled.1,
        l_curve,
    })
}

/// Reconstructs the DUT POVM from twin-beam counts given the photon-number
/// distribution of the source.
pub fn reconstruct_povm(
    dataset: &CountsDataset,
    state: &PhotonDistribution,
    config: &ReconConfig,
) -> Result<PovmEstimate> {
    config.validate()?;
    let schedule = dataset.schedule();
    let n_outcomes = dataset.n_outcomes();
    let table = tally_frequencies(dataset)?;
    let (gamma, curve) = resolve_gamma(config, |g| {
        assemble_povm_problem(&table, state, schedule, &config.with_gamma(g))
    })?;
    let fixed = config.with_gamma(gamma);
    let pooled = solve_povm(&assemble_povm_problem(&table, state, schedule, &fixed)?, &fixed, n_outcomes)?;
    if !pooled.1.converged {
        return Err(not_converged(&pooled.1));
    }

    let parts: Vec<CountsDataset> = match config.uncertainty {
        UncertaintyMethod::DisjointSplits => split_counts(dataset, config.replicates, config.seed)?,
        UncertaintyMethod::Bootstrap => (0..config.replicates)
            .map(|i| bootstrap_counts(dataset, i, config.seed))
            .collect::<Result<_>>()?,
    };
    let fits = map_indexed(config.execution, parts.len(), |i| {
        let table = tally_frequencies(&parts[i])?;
        solve_povm(&assemble_povm_problem(&table, state, schedule, &fixed)?, &fixed, n_outcomes)
    });
    combine(pooled, fits, (gamma, curve), config)
}

/// Reconstructs the POVM from coherent-probe counts.
pub fn reconstruct_povm_classical(dataset: &CoherentDataset, config: &ReconConfig) -> Result<PovmEstimate> {
    config.validate()?;
    let n_outcomes = dataset.settings[0].counts.len();
    let (gamma, curve) = resolve_gamma(config, |g| {
        assemble_classical_problem(dataset, n_outcomes, &config.with_gamma(g))
    })?;
    let fixed = config.with_gamma(gamma);
    let pooled = solve_povm(&assemble_classical_problem(dataset, n_outcomes, &fixed)?, &fixed, n_outcomes)?;
    if !pooled.1.converged {
        return Err(not_converged(&pooled.1));
    }
    let parts: Vec<CoherentDataset> = match config.uncertainty {
        UncertaintyMethod::DisjointSplits => split_coherent(dataset, config.replicates, config.seed)?,
        UncertaintyMethod::Bootstrap => (0..config.replicates)
            .map(|i| bootstrap_coherent(dataset, i, config.seed))
            .collect::<Result<_>>()?,
    };
    let fits = map_indexed(config.execution, parts.len(), |i| {
        solve_povm(&assemble_classical_problem(&parts[i], n_outcomes, &fixed)?, &fixed, n_outcomes)
    });
    combine(pooled, fits, (gamma, curve), config)
}

/// Frequency table holding exact model probabilities, for noiseless studies.
/// `trials` only sets the binomial weights.
pub fn exact_frequency_table(
    povm: &PovmMatrix,
    state: &PhotonDistribution,
    schedule: &EfficiencySchedule,
    trials: u64,
) -> Result<FrequencyTable> {
    let rows = schedule
        .etas()
        .iter()
        .map(|&eta| {
            let JointProbabilities { yes, no } = forward_joint_probabilities(povm, state, eta)?;
            let f_outcome: Vec<f64> = yes.iter().zip(&no).map(|(y, n)| y + n).collect();
            let cond = |p: &[f64]| -> Vec<Option<f64>> {
                p.iter()
                    .zip(&f_outcome)
                    .map(|(&x, &f)| (f > 0.0).then(|| x / f))
                    .collect()
            };
            Ok(FrequencyRow {
                eta,
                trials,
                f_yes_given: cond(&yes),
                f_no_given: cond(&no),
                f_outcome,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(FrequencyTable { rows })
}

/// Fidelity between measured and predicted `(p(n, yes), p(n, no))` at one
/// efficiency and outcome.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyPoint {
    pub eta: f64,
    pub outcome: usize,
    pub measured_yes: f64,
    pub measured_no: f64,
    pub predicted_yes: f64,
    pub predicted_no: f64,
    /// `None` when both distributions are empty.
    pub fidelity: Option<f64>,
}

/// Pushes a POVM and state through the forward model and compares the result
/// with the observed frequencies, per efficiency and outcome.
pub fn self_consistency(
    freqs: &FrequencyTable,
    povm: &PovmMatrix,
    state: &PhotonDistribution,
) -> Result<Vec<ConsistencyPoint>> {
    let mut out = Vec::new();
    for row in &freqs.rows {
        let pred = forward_joint_probabilities(povm, state, row.eta)?;
        for n in 0..freqs.n_outcomes() {
            let measured = [row.p_exp_yes(n), row.p_exp_no(n)];
            let predicted = [pred.yes[n], pred.no[n]];
            let fidelity = if measured.iter().sum::<f64>() > 0.0 && predicted.iter().sum::<f64>() > 0.0 {
                Some(crate::model::fidelity(&measured, &predicted)?)
            } else {
                None
            };
            out.push(ConsistencyPoint {
                eta: row.eta,
                outcome: n,
                measured_yes: measured[0],
                measured_no: measured[1],
                predicted_yes: predicted[0],
                predicted_no: predicted[1],
                fidelity,
            });
        }
    }
    Ok(out)
}

/// Settings of the quantum-versus-classical benchmark.
///
/// Both arms share the source brightness, the efficiency settings, the event
/// budget and the model truncation. The quantum arm heralds with the
/// tomographer at `η_ν`; the classical arm probes with coherent states of
/// mean `μ (1 - η_ν)`, the light a tomographer at `η_ν` would pass on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkConfig {
    pub mu: f64,
    pub schedule: EfficiencySchedule,
    /// Truncation of both simulation and reconstruction.
    pub truncation: usize,
    pub gamma: f64,
    pub budget: u64,
    pub repetitions: usize,
    pub seed: u64,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        Self {
            mu: 1.0,
            schedule: EfficiencySchedule::linspace(0.05, 0.95, 20).expect("valid grid"),
            truncation: 3,
            gamma: 0.0,
            budget: 1_000_000,
            repetitions: 50,
            seed: 42,
        }
    }
}

impl BenchmarkConfig {
    pub fn classical_intensities(&self) -> Vec<f64> {
        self.schedule.etas().iter().map(|e| self.mu * (1.0 - e)).collect()
    }

    pub fn pulses_per_setting(&self) -> u64 {
        self.budget / self.schedule.len() as u64
    }
}

/// Outcome of one repetition of both arms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkRepetition {
    pub index: usize,
    pub mse_quantum: Option<f64>,
    pub mse_classical: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmSummary {
    pub median_mse: f64,
    pub mean_mse: f64,
    /// `element_std[n][m]` over successful repetitions.
    pub element_std: Vec<Vec<f64>>,
    pub failed_repetitions: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub config: BenchmarkConfig,
    pub eta_dut: f64,
    pub true_povm: Vec<Vec<f64>>,
    pub repetitions: Vec<BenchmarkRepetition>,
    pub quantum: ArmSummary,
    pub classical: ArmSummary,
    /// Median quantum MSE over median classical MSE.
    pub mse_ratio: f64,
}

fn derive_seed(seed: u64, tag: u64, index: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((tag << 32) | index as u64);
    rng.next_u64()
}

fn mse(a: &PovmMatrix, b: &PovmMatrix) -> f64 {
    let diff = a.elements() - b.elements();
    diff.norm_squared() / diff.len() as f64
}

fn median(values: &mut [f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    values.sort_by(|a, b| a.total_cmp(b));
    let k = values.len();
    if k % 2 == 1 {
        values[k / 2]
    } else {
        0.5 * (values[k / 2 - 1] + values[k / 2])
    }
}

fn summarize(fits: &[Option<(PovmMatrix, f64)>]) -> ArmSummary {
    let ok: Vec<&(PovmMatrix, f64)> = fits.iter().flatten().collect();
    let failed_repetitions = fits
        .iter()
        .enumerate()
        .filter_map(|(i, f)| f.is_none().then_some(i))
        .collect();
    let mut mses: Vec<f64> = ok.iter().map(|(_, e)| *e).collect();
    let mean_mse = mses.iter().sum::<f64>() / mses.len().max(1) as f64;
    let element_std = if let Some((first, _)) = ok.first() {
        let (n_out, m_max) = (first.n_outcomes(), first.truncation());
        let k = ok.len() as f64;
        (0..n_out)
            .map(|n| {
                (0..=m_max)
                    .map(|m| {
                        if ok.len() < 2 {
                            return 0.0;
                        }
                        let mean = ok.iter().map(|(p, _)| p.get(n, m)).sum::<f64>() / k;
                        let ss: f64 = ok.iter().map(|(p, _)| (p.get(n, m) - mean).powi(2)).sum();
                        (ss / (k - 1.0)).sqrt()
                    })
                    .collect()
            })
            .collect()
    } else {
        vec![]
    };
    ArmSummary {
        median_mse: median(&mut mses),
        mean_mse,
        element_std,
        failed_repetitions,
    }
}

/// Runs `repetitions` independent simulate-and-reconstruct cycles of both
/// protocols at equal event budgets.
pub fn compare_protocols(
    tree: &DetectorTreeSpec,
    config: &BenchmarkConfig,
    execution: Execution,
) -> Result<BenchmarkReport> {
    if config.repetitions == 0 {
        return Err(Error::InvalidInput("benchmark needs at least one repetition".into()));
    }
    let pulses = config.pulses_per_setting();
    if pulses == 0 {
        return Err(Error::InvalidInput(format!(
            "budget {} is smaller than the {} settings",
            config.budget,
            config.schedule.len()
        )));
    }
    let source = PoissonSource::new(config.mu)?;
    let truth = theoretical_tree_povm(tree, config.truncation)?;
    let state = source.distribution(config.truncation);
    let intensities = config.classical_intensities();
    let recon = ReconConfig {
        truncation: config.truncation,
        gamma: GammaSetting::Fixed(config.gamma),
        replicates: 1,
        execution: Execution::Sequential,
        ..ReconConfig::default()
    };
    let sim = SimOptions {
        truncation: config.truncation,
        execution: Execution::Sequential,
    };

    let runs = map_indexed(execution, config.repetitions, |rep| {
        let quantum = simulate_twin_beam_run_with(
            &source,
            tree,
            &config.schedule,
            pulses,
            derive_seed(config.seed, 1, rep),
            sim,
        )
        .and_then(|ds| {
            let table = tally_frequencies(&ds)?;
            let problem = assemble_povm_problem(&table, &state, &config.schedule, &recon)?;
            solve_povm(&problem, &recon, truth.n_outcomes())
        })
        .ok()
        .filter(|(_, r)| r.converged)
        .map(|(p, _)| {
            let e = mse(&p, &truth);
            (p, e)
        });
        let classical = simulate_coherent_run_with(
            &truth,
            &intensities,
            pulses,
            derive_seed(config.seed, 2, rep),
            Execution::Sequential,
        )
        .and_then(|ds| {
            let problem = assemble_classical_problem(&ds, truth.n_outcomes(), &recon)?;
            solve_povm(&problem, &recon, truth.n_outcomes())
        })
        .ok()
        .filter(|(_, r)| r.converged)
        .map(|(p, _)| {
            let e = mse(&p, &truth);
            (p, e)
        });
        (quantum, classical)
    });

    let (q, c): (Vec<_>, Vec<_>) = runs.into_iter().unzip();
    let repetitions = q
        .iter()
        .zip(&c)
        .enumerate()
        .map(|(index, (q, c))| BenchmarkRepetition {
            index,
            mse_quantum: q.as_ref().map(|x| x.1),
            mse_classical: c.as_ref().map(|x| x.1),
        })
        .collect();
    let quantum = summarize(&q);
    let classical = summarize(&c);
    if quantum.failed_repetitions.len() == config.repetitions
        || classical.failed_repetitions.len() == config.repetitions
    {
        return Err(Error::NotConverged {
            replicates: quantum.failed_repetitions.clone(),
            detail: "no repetition of at least one arm produced a converged reconstruction".into(),
        });
    }
    Ok(BenchmarkReport {
        config: config.clone(),
        eta_dut: tree.eta_dut(),
        true_povm: truth.to_rows(),
        repetitions,
        mse_ratio: quantum.median_mse / classical.median_mse,
        quantum,
        classical,
    })
}

/// Per-column fidelities of an estimate against the ideal tree POVM.
pub fn fidelities_against_tree(povm: &PovmMatrix, tree: &DetectorTreeSpec) -> Result<Vec<f64>> {
    column_fidelities(povm, &theoretical_tree_povm(tree, povm.truncation())?)
}

/// Noiseless coherent-probe dataset with `trials` scaling the expected counts.
pub fn expected_coherent_dataset(
    povm: &PovmMatrix,
    intensities: &[f64],
    trials: u64,
) -> Result<CoherentDataset> {
    let settings = intensities
        .iter()
        .map(|&a| {
            let p = coherent_response(povm, a)?;
            let mut counts: Vec<u64> = p.iter().map(|x| (x * trials as f64).round() as u64).collect();
            let total: u64 = counts.iter().sum();
            // Put rounding slack on the most likely outcome so counts sum to trials.
            let argmax = p
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .map(|(i, _)| i)
                .unwrap_or(0);
            counts[argmax] = (counts[argmax] + trials).saturating_sub(total);
            Ok(crate::sim::CoherentCounts {
                alpha_sq: a,
                trials,
                counts,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    CoherentDataset::new(settings, None)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::fidelity;

    fn poisson_state() -> PhotonDistribution {
        PoissonSource::new(0.5983).unwrap().distribution(5)
    }

    fn noiseless_config() -> ReconConfig {
        ReconConfig {
            gamma: GammaSetting::Fixed(0.0),
            weighting: RowWeighting::Uniform,
            ..ReconConfig::default()
        }
    }

    #[test]
    fn problem_dimensions() {
        let tree = theoretical_tree_povm(&DetectorTreeSpec::two_spad(0.5).unwrap(), 5).unwrap();
        let schedule = EfficiencySchedule::default_grid();
        let table = exact_frequency_table(&tree, &poisson_state(), &schedule, 1 << 30).unwrap();
        let p = assemble_povm_problem(&table, &poisson_state(), &schedule, &noiseless_config()).unwrap();
        assert_eq!(p.design().nrows(), 120);
        assert_eq!(p.design().ncols(), 18);
        assert_eq!(p.groups().len(), 6);
        assert!(p.objective(&tree.to_flat()) < 1e-28);
    }

    #[test]
    fn row_coefficient_example() {
        let state = poisson_state();
        let schedule = EfficiencySchedule::new(vec![0.1]).unwrap();
        let tree = theoretical_tree_povm(&DetectorTreeSpec::two_spad(0.5).unwrap(), 5).unwrap();
        let table = exact_frequency_table(&tree, &state, &schedule, 1000).unwrap();
        let p = assemble_povm_problem(&table, &state, &schedule, &noiseless_config()).unwrap();
        // Row 0: (eta 0.1, n 0, yes); column of (n 0, m 2).
        let s2 = 0.5983f64.powi(2) / 2.0 * (-0.5983f64).exp() / state_norm();
        assert!((p.design()[(0, 2)] - s2 * 0.19).abs() < 1e-12);
        assert!((p.design()[(0, 2)] - 0.018696).abs() < 5e-6);
    }

    fn state_norm() -> f64 {
        poisson_pmf(0.5983, 5).iter().sum()
    }

    #[test]
    fn truncation_mismatch_rejected() {
        let state = PoissonSource::new(0.5).unwrap().distribution(4);
        let tree = theoretical_tree_povm(&DetectorTreeSpec::two_spad(0.5).unwrap(), 4).unwrap();
        let schedule = EfficiencySchedule::default_grid();
        let table = exact_frequency_table(&tree, &state, &schedule, 1000).unwrap();
        assert!(assemble_povm_problem(&table, &state, &schedule, &noiseless_config()).is_err());
    }

    #[test]
    fn missing_efficiency_row_rejected() {
        let state = poisson_state();
        let tree = theoretical_tree_povm(&DetectorTreeSpec::two_spad(0.5).unwrap(), 5).unwrap();
        let table = exact_frequency_table(&tree, &state, &EfficiencySchedule::linspace(0.1, 0.2, 6).unwrap(), 10).unwrap();
        let other = EfficiencySchedule::linspace(0.1, 0.3, 6).unwrap();
        assert!(assemble_povm_problem(&table, &state, &other, &noiseless_config()).is_err());
    }

    #[test]
    fn noiseless_identity_classical() {
        let id = PovmMatrix::identity(3);
        let intensities: Vec<f64> = (1..=20).map(|k| 0.2 * k as f64).collect();
        let ds = expected_coherent_dataset(&id, &intensities, 1 << 40).unwrap();
        let cfg = ReconConfig {
            truncation: 3,
            replicates: 1,
            ..noiseless_config()
        };
        let est = reconstruct_povm_classical(&ds, &cfg).unwrap();
        for n in 0..4 {
            for m in 0..4 {
                let e = if n == m { 1.0 } else { 0.0 };
                assert!((est.povm.get(n, m) - e).abs() < 1e-3);
            }
        }
    }

    #[test]
    fn l_curve_picks_an_interior_point() {
        let schedule = EfficiencySchedule::default_grid();
        let state = poisson_state();
        let ds = crate::sim::simulate_twin_beam_run(
            &PoissonSource::new(0.5983).unwrap(),
            &DetectorTreeSpec::two_spad(0.5).unwrap(),
            &schedule,
            200_000,
            4,
        )
        .unwrap();
        let table = tally_frequencies(&ds).unwrap();
        let cfg = ReconConfig::default();
        let curve = l_curve(&default_gamma_grid(), Execution::default(), &cfg.solver, |g| {
            assemble_povm_problem(&table, &state, &schedule, &cfg.with_gamma(g))
        })
        .unwrap();
        assert!(curve.corner > 0 && curve.corner < curve.points.len() - 1);
        assert!(curve.points.windows(2).all(|w| w[1].penalty_norm <= w[0].penalty_norm * (1.0 + 1e-6)));
    }

    #[test]
    fn self_consistency_exact() {
        let tree = theoretical_tree_povm(&DetectorTreeSpec::two_spad(0.5).unwrap(), 5).unwrap();
        let schedule = EfficiencySchedule::default_grid();
        let state = poisson_state();
        let table = exact_frequency_table(&tree, &state, &schedule, 1).unwrap();
        for p in self_consistency(&table, &tree, &state).unwrap() {
            assert!((p.fidelity.unwrap() - 1.0).abs() < 1e-12);
        }
        let _ = fidelity(&[1.0], &[1.0]).unwrap();
    }

    #[test]
    fn benchmark_validation() {
        let tree = DetectorTreeSpec::two_spad(0.5).unwrap();
        let cfg = BenchmarkConfig {
            repetitions: 0,
            ..BenchmarkConfig::default()
        };
        assert!(compare_protocols(&tree, &cfg, Execution::Sequential).is_err());
        let cfg = BenchmarkConfig {
            budget: 5,
            ..BenchmarkConfig::default()
        };
        assert!(compare_protocols(&tree, &cfg, Execution::Sequential).is_err());
    }

    #[test]
    fn single_repetition_benchmark() {
        let tree = DetectorTreeSpec::two_spad(0.5).unwrap();
        let cfg = BenchmarkConfig {
            repetitions: 1,
            budget: 100_000,
            ..BenchmarkConfig::default()
        };
        let r = compare_protocols(&tree, &cfg, Execution::Sequential).unwrap();
        assert_eq!(r.repetitions.len(), 1);
        assert!(r.repetitions[0].mse_quantum.is_some());
        assert!(r.repetitions[0].mse_classical.is_some());
    }
}
