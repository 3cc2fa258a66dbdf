//! Domain types and closed-form probability models.
//!
//! Everything here is diagonal in the Fock basis: a source is described by its
//! photon-number distribution and a phase-insensitive detector by the matrix of
//! conditional outcome probabilities `P(n | m)`.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{check_unit_interval, Error, Result};

/// Tolerance used when validating probability normalization.
pub const NORMALIZATION_TOL: f64 = 1e-9;

/// Default truncation for simulation-side state expansion.
pub const SIMULATION_TRUNCATION: usize = 20;

/// Default truncation for reconstruction targets.
pub const RECONSTRUCTION_TRUNCATION: usize = 5;

/// Photon-number distribution `|R_m|^2` for `m = 0..=M`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhotonDistribution {
    probs: Vec<f64>,
}

impl PhotonDistribution {
    /// Builds a distribution from nonnegative weights. Weights are renormalized
    /// to sum to one, which folds any truncation deficit back into the retained
    /// entries.
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::InvalidInput("photon distribution is empty".into()));
        }
        if weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::NonFinite("photon distribution"));
        }
        if let Some(w) = weights.iter().find(|w| **w < 0.0) {
            return Err(Error::InvalidInput(format!(
                "photon distribution has negative weight {w}"
            )));
        }
        let total: f64 = weights.iter().sum();
        if total <= 0.0 {
            return Err(Error::InvalidInput(
                "photon distribution has zero total weight".into(),
            ));
        }
        let probs = weights.into_iter().map(|w| w / total).collect();
        Ok(Self { probs })
    }

    /// The Fock state `|m><m|` truncated at `truncation`.
    pub fn fock(m: usize, truncation: usize) -> Result<Self> {
        if m > truncation {
            return Err(Error::InvalidInput(format!(
                "Fock index {m} exceeds truncation {truncation}"
            )));
        }
        let mut probs = vec![0.0; truncation + 1];
        probs[m] = 1.0;
        Ok(Self { probs })
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn truncation(&self) -> usize {
        self.probs.len() - 1
    }

    pub fn mean(&self) -> f64 {
        self.probs
            .iter()
            .enumerate()
            .map(|(m, p)| m as f64 * p)
            .sum()
    }
}

/// Poisson probabilities `e^{-mean} mean^m / m!` for `m = 0..=truncation`,
/// without renormalization.
pub fn poisson_pmf(mean: f64, truncation: usize) -> Vec<f64> {
    let mut pmf = Vec::with_capacity(truncation + 1);
    let mut term = (-mean).exp();
    for m in 0..=truncation {
        pmf.push(term);
        term *= mean / (m + 1) as f64;
    }
    pmf
}

/// A twin-beam source whose photon-pair number is Poisson distributed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoissonSource {
    mu: f64,
}

impl PoissonSource {
    pub fn new(mu: f64) -> Result<Self> {
        if !(mu.is_finite() && mu > 0.0) {
            return Err(Error::OutOfRange {
                name: "mu",
                value: mu,
                range: "(0, inf)",
            });
        }
        Ok(Self { mu })
    }

    pub fn mu(&self) -> f64 {
        self.mu
    }

    /// Expands to a distribution truncated at `truncation` and renormalized.
    pub fn distribution(&self, truncation: usize) -> PhotonDistribution {
        PhotonDistribution::new(poisson_pmf(self.mu, truncation))
            .expect("Poisson weights are positive")
    }

    /// `P(m > truncation)` for the untruncated source.
    pub fn tail_probability(&self, truncation: usize) -> f64 {
        // Summing the tail directly avoids cancellation in 1 - cdf.
        let mut term = poisson_pmf(self.mu, truncation)[truncation];
        let mut tail = 0.0;
        let mut m = truncation;
        loop {
            m += 1;
            term *= self.mu / m as f64;
            tail += term;
            if term < 1e-300 || (m > truncation + 10 && term < tail * 1e-17) {
                break;
            }
        }
        tail
    }
}

/// Diagonal POVM `Pi[n][m] = P(outcome n | m photons)`.
///
/// Rows index outcomes, columns photon numbers; every column is a probability
/// distribution over outcomes.
#[derive(Debug, Clone, PartialEq)]
pub struct PovmMatrix {
    elements: DMatrix<f64>,
}

impl PovmMatrix {
    pub fn new(elements: DMatrix<f64>) -> Result<Self> {
        if elements.nrows() == 0 || elements.ncols() == 0 {
            return Err(Error::InvalidInput("POVM matrix is empty".into()));
        }
        if elements.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("POVM matrix"));
        }
        if let Some(x) = elements.iter().find(|x| !(0.0..=1.0).contains(*x)) {
            return Err(Error::InvalidInput(format!(
                "POVM element {x} is outside [0, 1]"
            )));
        }
        for (m, col) in elements.column_iter().enumerate() {
            let sum: f64 = col.iter().sum();
            if (sum - 1.0).abs() > NORMALIZATION_TOL {
                return Err(Error::InvalidInput(format!(
                    "POVM column {m} sums to {sum}, expected 1"
                )));
            }
        }
        Ok(Self { elements })
    }

    /// Builds from row vectors `rows[n][m]`.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::DimensionMismatch("ragged POVM rows".into()));
        }
        Self::new(DMatrix::from_fn(n, cols, |i, j| rows[i][j]))
    }

    /// Ideal photon-number-resolving detector with `truncation + 1` outcomes.
    pub fn identity(truncation: usize) -> Self {
        Self {
            elements: DMatrix::identity(truncation + 1, truncation + 1),
        }
    }

    /// Reshapes a solver vector laid out as `x[n * (M + 1) + m]`, clamping
    /// round-off excursions and renormalizing each column.
    pub(crate) fn from_flat(x: &[f64], n_outcomes: usize, truncation: usize) -> Result<Self> {
        let cols = truncation + 1;
        if x.len() != n_outcomes * cols {
            return Err(Error::DimensionMismatch(format!(
                "flat POVM has {} entries, expected {}",
                x.len(),
                n_outcomes * cols
            )));
        }
        let mut elements =
            DMatrix::from_fn(n_outcomes, cols, |n, m| x[n * cols + m].clamp(0.0, 1.0));
        for mut col in elements.column_iter_mut() {
            let sum: f64 = col.iter().sum();
            if sum > 0.0 {
                col /= sum;
            }
        }
        Self::new(elements)
    }

    pub fn n_outcomes(&self) -> usize {
        self.elements.nrows()
    }

    pub fn truncation(&self) -> usize {
        self.elements.ncols() - 1
    }

    pub fn get(&self, n: usize, m: usize) -> f64 {
        self.elements[(n, m)]
    }

    pub fn column(&self, m: usize) -> Vec<f64> {
        self.elements.column(m).iter().copied().collect()
    }

    pub fn row(&self, n: usize) -> Vec<f64> {
        self.elements.row(n).iter().copied().collect()
    }

    pub fn elements(&self) -> &DMatrix<f64> {
        &self.elements
    }

    /// Row-major copy, `rows[n][m]`.
    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        (0..self.n_outcomes()).map(|n| self.row(n)).collect()
    }

    /// Flattened `x[n * (M + 1) + m]`, the solver layout.
    pub fn to_flat(&self) -> Vec<f64> {
        self.to_rows().concat()
    }
}

/// Calibrated tomographer efficiencies `eta_nu`, strictly increasing in `(0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EfficiencySchedule {
    etas: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    uncertainties: Option<Vec<f64>>,
}

impl EfficiencySchedule {
    pub fn new(etas: Vec<f64>) -> Result<Self> {
        if etas.is_empty() {
            return Err(Error::InvalidInput("efficiency schedule is empty".into()));
        }
        for &eta in &etas {
            if !(eta.is_finite() && eta > 0.0 && eta <= 1.0) {
                return Err(Error::OutOfRange {
                    name: "eta",
                    value: eta,
                    range: "(0, 1]",
                });
            }
        }
        if let Some(w) = etas.windows(2).find(|w| w[1] <= w[0]) {
            return Err(Error::InvalidInput(format!(
                "efficiencies must be strictly increasing ({} then {})",
                w[0], w[1]
            )));
        }
        Ok(Self {
            etas,
            uncertainties: None,
        })
    }

    /// Attaches per-efficiency standard uncertainties.
    pub fn with_uncertainties(mut self, sigmas: Vec<f64>) -> Result<Self> {
        if sigmas.len() != self.etas.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} uncertainties for {} efficiencies",
                sigmas.len(),
                self.etas.len()
            )));
        }
        if sigmas.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
            return Err(Error::InvalidInput(
                "efficiency uncertainties must be finite and nonnegative".into(),
            ));
        }
        self.uncertainties = Some(sigmas);
        Ok(self)
    }

    /// `count` values evenly spaced over `[lo, hi]`, rounded to 12 decimals so
    /// that they print cleanly.
    pub fn linspace(lo: f64, hi: f64, count: usize) -> Result<Self> {
        let etas = match count {
            0 => Vec::new(),
            1 => vec![lo],
            _ => (0..count)
                .map(|i| {
                    let x = lo + (hi - lo) * i as f64 / (count - 1) as f64;
                    (x * 1e12).round() / 1e12
                })
                .collect(),
        };
        Self::new(etas)
    }

    /// 20 values evenly spaced over `[0.01, 0.20]`.
    pub fn default_grid() -> Self {
        Self::linspace(0.01, 0.20, 20).expect("default grid is valid")
    }

    pub fn etas(&self) -> &[f64] {
        &self.etas
    }

    pub fn uncertainties(&self) -> Option<&[f64]> {
        self.uncertainties.as_deref()
    }

    pub fn len(&self) -> usize {
        self.etas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.etas.is_empty()
    }
}

/// Detector tree: `n_spads` binary detectors behind balanced splitters, with
/// total efficiency `eta_dut` including optical losses.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectorTreeSpec {
    eta_dut: f64,
    n_spads: usize,
}

impl DetectorTreeSpec {
    /// Two SPADs behind a 50:50 splitter, outcomes {0, 1, 2+}.
    pub fn two_spad(eta_dut: f64) -> Result<Self> {
        Self::new(eta_dut, 2)
    }

    pub fn new(eta_dut: f64, n_spads: usize) -> Result<Self> {
        check_unit_interval("eta_dut", eta_dut)?;
        if n_spads == 0 {
            return Err(Error::InvalidInput("a detector tree needs at least one SPAD".into()));
        }
        Ok(Self { eta_dut, n_spads })
    }

    pub fn eta_dut(&self) -> f64 {
        self.eta_dut
    }

    pub fn n_spads(&self) -> usize {
        self.n_spads
    }

    pub fn n_outcomes(&self) -> usize {
        self.n_spads + 1
    }
}

/// Joint outcome probabilities `p(n, yes)` and `p(n, no)` at one tomographer
/// efficiency.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointProbabilities {
    pub yes: Vec<f64>,
    pub no: Vec<f64>,
}

/// `(1 - eta)^m` for `m = 0..=truncation`.
pub(crate) fn no_click_powers(eta: f64, truncation: usize) -> Vec<f64> {
    let mut powers = Vec::with_capacity(truncation + 1);
    let mut q = 1.0;
    for _ in 0..=truncation {
        powers.push(q);
        q *= 1.0 - eta;
    }
    powers
}

/// Joint probabilities of DUT outcome `n` with a tomographer click (`yes`) or
/// no click (`no`) for a twin-beam state with pair distribution `state`.
pub fn forward_joint_probabilities(
    povm: &PovmMatrix,
    state: &PhotonDistribution,
    eta: f64,
) -> Result<JointProbabilities> {
    check_unit_interval("eta", eta)?;
    if povm.truncation() != state.truncation() {
        return Err(Error::DimensionMismatch(format!(
            "POVM truncation {} vs state truncation {}",
            povm.truncation(),
            state.truncation()
        )));
    }
    let q = no_click_powers(eta, state.truncation());
    let s = state.probs();
    let mut yes = vec![0.0; povm.n_outcomes()];
    let mut no = vec![0.0; povm.n_outcomes()];
    for n in 0..povm.n_outcomes() {
        for m in 0..=state.truncation() {
            let w = povm.get(n, m) * s[m];
            no[n] += w * q[m];
            yes[n] += w * (1.0 - q[m]);
        }
    }
    Ok(JointProbabilities { yes, no })
}

/// Unconditional tomographer no-click probability `sum_m |R_m|^2 (1 - eta)^m`.
pub fn no_click_probability(state: &PhotonDistribution, eta: f64) -> Result<f64> {
    check_unit_interval("eta", eta)?;
    let q = no_click_powers(eta, state.truncation());
    Ok(state.probs().iter().zip(&q).map(|(p, q)| p * q).sum())
}

/// Closed-form POVM of a two-SPAD tree: each photon is lost with probability
/// `1 - eta` or reaches either SPAD with probability `eta / 2`.
pub fn theoretical_tree_povm(spec: &DetectorTreeSpec, truncation: usize) -> Result<PovmMatrix> {
    if spec.n_spads() != 2 {
        return Err(Error::NotImplemented(format!(
            "closed-form tree POVM for {} SPADs",
            spec.n_spads()
        )));
    }
    let eta = spec.eta_dut();
    let none = no_click_powers(eta, truncation);
    let one_side = no_click_powers(eta / 2.0, truncation);
    let elements = DMatrix::from_fn(3, truncation + 1, |n, m| {
        let p0 = none[m];
        let p1 = 2.0 * one_side[m] - 2.0 * none[m];
        match n {
            0 => p0,
            1 => p1,
            _ => {
                // 1 - 2(1 - eta/2)^m + (1 - eta)^m, written so the column sums to 1.
                let p2 = 1.0 - p0 - p1;
                if p2.abs() < 1e-15 {
                    0.0
                } else {
                    p2.clamp(0.0, 1.0)
                }
            }
        }
    });
    PovmMatrix::new(elements)
}

/// Outcome distribution of the DUT probed by a coherent state of mean photon
/// number `alpha_sq`; the Poisson weights are renormalized over `0..=M`.
pub fn coherent_response(povm: &PovmMatrix, alpha_sq: f64) -> Result<Vec<f64>> {
    if !(alpha_sq.is_finite() && alpha_sq >= 0.0) {
        return Err(Error::OutOfRange {
            name: "alpha_sq",
            value: alpha_sq,
            range: "[0, inf)",
        });
    }
    let weights = PhotonDistribution::new(poisson_pmf(alpha_sq, povm.truncation()))?;
    Ok((0..povm.n_outcomes())
        .map(|n| {
            weights
                .probs()
                .iter()
                .enumerate()
                .map(|(m, w)| povm.get(n, m) * w)
                .sum()
        })
        .collect())
}

/// Classical fidelity `sum_k sqrt(p_k q_k)` after normalizing both inputs.
pub fn fidelity(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::DimensionMismatch(format!(
            "fidelity of vectors of length {} and {}",
            p.len(),
            q.len()
        )));
    }
    let p_sum = checked_total(p)?;
    let q_sum = checked_total(q)?;
    let f: f64 = p
        .iter()
        .zip(q)
        .map(|(a, b)| ((a / p_sum) * (b / q_sum)).sqrt())
        .sum();
    Ok(f.clamp(0.0, 1.0))
}

fn checked_total(v: &[f64]) -> Result<f64> {
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("fidelity input"));
    }
    if v.iter().any(|x| *x < 0.0) {
        return Err(Error::InvalidInput("fidelity input has a negative entry".into()));
    }
    let total: f64 = v.iter().sum();
    if total <= 0.0 {
        return Err(Error::InvalidInput("fidelity input is all zero".into()));
    }
    Ok(total)
}

/// Per-photon-number fidelities between matching columns of two POVMs.
pub fn column_fidelities(a: &PovmMatrix, b: &PovmMatrix) -> Result<Vec<f64>> {
    if a.n_outcomes() != b.n_outcomes() {
        return Err(Error::DimensionMismatch(format!(
            "{} vs {} outcomes",
            a.n_outcomes(),
            b.n_outcomes()
        )));
    }
    let cols = a.truncation().min(b.truncation()) + 1;
    (0..cols)
        .map(|m| fidelity(&a.column(m), &b.column(m)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn poisson(mu: f64, m: usize) -> PhotonDistribution {
        PoissonSource::new(mu).unwrap().distribution(m)
    }

    #[test]
    fn forward_at_zero_efficiency_has_no_clicks() {
        let povm = theoretical_tree_povm(&DetectorTreeSpec::two_spad(0.5).unwrap(), 5).unwrap();
        let state = poisson(0.5983, 5);
        let p = forward_joint_probabilities(&povm, &state, 0.0).unwrap();
        assert!(p.yes.iter().all(|&y| y == 0.0));
        for n in 0..3 {
            let expected: f64 = (0..=5).map(|m| povm.get(n, m) * state.probs()[m]).sum();
            assert_abs_diff_eq!(p.no[n], expected, epsilon = 1e-15);
        }
    }

    #[test]
    fn forward_with_ideal_detector() {
        let state = poisson(0.8, 6);
        let eta = 0.3;
        let p = forward_joint_probabilities(&PovmMatrix::identity(6), &state, eta).unwrap();
        for n in 0..=6 {
            let expected = state.probs()[n] * (1.0 - eta).powi(n as i32);
            assert_abs_diff_eq!(p.no[n], expected, epsilon = 1e-15);
        }
        let total: f64 = p.yes.iter().chain(&p.no).sum();
        assert_abs_diff_eq!(total, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn forward_rejects_bad_inputs() {
        let povm = PovmMatrix::identity(3);
        let state = poisson(0.5, 4);
        assert!(matches!(
            forward_joint_probabilities(&povm, &state, 0.5),
            Err(Error::DimensionMismatch(_))
        ));
        let state = poisson(0.5, 3);
        assert!(forward_joint_probabilities(&povm, &state, 1.5).is_err());
        assert!(forward_joint_probabilities(&povm, &state, -0.1).is_err());
    }

    #[test]
    fn no_click_examples() {
        let state = poisson(0.5983, 20);
        assert_abs_diff_eq!(no_click_probability(&state, 0.0).unwrap(), 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(
            no_click_probability(&state, 1.0).unwrap(),
            (-0.5983f64).exp(),
            epsilon = 1e-9
        );
        assert_abs_diff_eq!(
            no_click_probability(&state, 0.1).unwrap(),
            (-0.05983f64).exp(),
            epsilon = 1e-9
        );
        assert_abs_diff_eq!(no_click_probability(&state, 1.0).unwrap(), 0.54975, epsilon = 5e-6);
        assert_abs_diff_eq!(no_click_probability(&state, 0.1).unwrap(), 0.941925, epsilon = 5e-7);
        assert!(no_click_probability(&state, 1.01).is_err());
    }

    #[test]
    fn tree_povm_examples() {
        let povm = theoretical_tree_povm(&DetectorTreeSpec::two_spad(0.7).unwrap(), 5).unwrap();
        assert_eq!(povm.column(0), vec![1.0, 0.0, 0.0]);
        let c1 = povm.column(1);
        assert_abs_diff_eq!(c1[0], 0.3, epsilon = 1e-15);
        assert_abs_diff_eq!(c1[1], 0.7, epsilon = 1e-15);
        assert_eq!(c1[2], 0.0);

        let povm = theoretical_tree_povm(&DetectorTreeSpec::two_spad(0.5).unwrap(), 5).unwrap();
        let c2 = povm.column(2);
        assert_abs_diff_eq!(c2[0], 0.25, epsilon = 1e-15);
        assert_abs_diff_eq!(c2[1], 0.625, epsilon = 1e-15);
        assert_abs_diff_eq!(c2[2], 0.125, epsilon = 1e-15);
    }

    #[test]
    fn tree_povm_needs_two_spads() {
        let spec = DetectorTreeSpec::new(0.5, 3).unwrap();
        assert!(matches!(
            theoretical_tree_povm(&spec, 5),
            Err(Error::NotImplemented(_))
        ));
    }

    #[test]
    fn coherent_examples() {
        let tree = theoretical_tree_povm(&DetectorTreeSpec::two_spad(0.5).unwrap(), 10).unwrap();
        assert_eq!(coherent_response(&tree, 0.0).unwrap(), vec![1.0, 0.0, 0.0]);

        let p = coherent_response(&PovmMatrix::identity(20), 0.6).unwrap();
        assert_abs_diff_eq!(p[0], 0.548812, epsilon = 1e-6);
        let pmf = poisson_pmf(0.6, 20);
        for (a, b) in p.iter().zip(&pmf) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
        assert_abs_diff_eq!(p.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
        assert!(coherent_response(&tree, -1.0).is_err());
    }

    #[test]
    fn fidelity_examples() {
        let p = [0.2, 0.3, 0.5];
        assert_abs_diff_eq!(fidelity(&p, &p).unwrap(), 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(
            fidelity(&[1.0, 0.0], &[0.5, 0.5]).unwrap(),
            0.5f64.sqrt(),
            epsilon = 1e-15
        );
        // Unnormalized inputs are renormalized first.
        assert_abs_diff_eq!(fidelity(&[2.0, 0.0], &[3.0, 3.0]).unwrap(), 0.5f64.sqrt(), epsilon = 1e-15);
        assert!(fidelity(&[1.0], &[0.5, 0.5]).is_err());
        assert!(fidelity(&[0.0, 0.0], &[0.5, 0.5]).is_err());
    }

    #[test]
    fn distribution_and_schedule_validation() {
        assert!(PhotonDistribution::new(vec![]).is_err());
        assert!(PhotonDistribution::new(vec![0.5, -0.1]).is_err());
        let d = PhotonDistribution::new(vec![2.0, 2.0]).unwrap();
        assert_eq!(d.probs(), &[0.5, 0.5]);

        assert!(PoissonSource::new(0.0).is_err());
        assert!(EfficiencySchedule::new(vec![0.1, 0.1]).is_err());
        assert!(EfficiencySchedule::new(vec![0.0, 0.1]).is_err());
        assert!(EfficiencySchedule::new(vec![0.1, 1.1]).is_err());
        let grid = EfficiencySchedule::default_grid();
        assert_eq!(grid.len(), 20);
        assert_eq!(grid.etas()[0], 0.01);
        assert_eq!(grid.etas()[6], 0.07);
        assert_eq!(grid.etas()[19], 0.2);

        assert!(DetectorTreeSpec::two_spad(1.2).is_err());
        assert!(DetectorTreeSpec::new(0.5, 0).is_err());
    }

    #[test]
    fn poisson_tail_beyond_five() {
        let tail = PoissonSource::new(0.5983).unwrap().tail_probability(5);
        let direct = 1.0 - poisson_pmf(0.5983, 5).iter().sum::<f64>();
        assert_abs_diff_eq!(tail, direct, epsilon = 1e-14);
        assert!(tail < 4e-4);
    }

    #[test]
    fn povm_validation() {
        assert!(PovmMatrix::from_rows(&[vec![0.5, 1.0], vec![0.4, 0.0]]).is_err());
        assert!(PovmMatrix::from_rows(&[vec![1.5, 1.0], vec![-0.5, 0.0]]).is_err());
        let p = PovmMatrix::from_rows(&[vec![1.0, 0.3], vec![0.0, 0.7]]).unwrap();
        assert_eq!(p.to_flat(), vec![1.0, 0.3, 0.0, 0.7]);
        let back = PovmMatrix::from_flat(&p.to_flat(), 2, 1).unwrap();
        assert_eq!(back, p);
    }
}
