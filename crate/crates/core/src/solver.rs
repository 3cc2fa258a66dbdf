//! Constrained quadratic least squares.
//!
//! Minimizes `||A x - b||² + γ ||D x||²` over `x` whose grouped entries lie on
//! probability simplices and whose remaining entries lie in `[0, 1]`.
//!
//! The outer loop is projected gradient with Armijo backtracking. Because the
//! designs met in detector tomography are badly conditioned (cond(A) reaches
//! 1e8 on typical efficiency schedules), plain gradient steps stall long
//! before the optimum. After every gradient step the solver therefore also
//! minimizes exactly over the current face of the feasible set, via an SVD
//! least-squares solve in a null-space basis of the active constraints. The
//! face step is accepted only if it does not increase the objective, so the
//! iterates stay feasible and the objective trace stays monotone.

use nalgebra::{DMatrix, DVector, SymmetricEigen, SVD};

use crate::error::{Error, Result};

pub const DEFAULT_TOL: f64 = 1e-10;
pub const DEFAULT_MAX_ITERS: usize = 200_000;
/// Hessian eigenvalue below which a problem is reported rank deficient.
pub const RANK_DEFICIENCY_THRESHOLD: f64 = 1e-12;

const ARMIJO_SIGMA: f64 = 1e-4;
const ARMIJO_SHRINK: f64 = 0.5;
const POWER_ITERATIONS: usize = 200;

/// `min ||A x - b||² + γ ||D x||²` under simplex and box constraints.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticProblem {
    design: DMatrix<f64>,
    target: DVector<f64>,
    smoothing: DMatrix<f64>,
    gamma: f64,
    groups: Vec<Vec<usize>>,
    group_of: Vec<Option<usize>>,
}

impl QuadraticProblem {
    /// `smoothing = None` means no regularization rows.
    pub fn new(
        design: DMatrix<f64>,
        target: DVector<f64>,
        smoothing: Option<DMatrix<f64>>,
        gamma: f64,
        groups: Vec<Vec<usize>>,
    ) -> Result<Self> {
        let n = design.ncols();
        if n == 0 {
            return Err(Error::InvalidInput("design has no columns".into()));
        }
        if design.nrows() != target.len() {
            return Err(Error::DimensionMismatch(format!(
                "design has {} rows, target has {} entries",
                design.nrows(),
                target.len()
            )));
        }
        let smoothing = smoothing.unwrap_or_else(|| DMatrix::zeros(0, n));
        if smoothing.ncols() != n {
            return Err(Error::DimensionMismatch(format!(
                "smoothing has {} columns, design has {n}",
                smoothing.ncols()
            )));
        }
        if design.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("design"));
        }
        if target.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("target"));
        }
        if smoothing.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("smoothing"));
        }
        if !gamma.is_finite() || gamma < 0.0 {
            return Err(Error::OutOfRange {
                name: "gamma",
                value: gamma,
                range: "[0, inf)",
            });
        }
        let mut group_of = vec![None; n];
        for (g, members) in groups.iter().enumerate() {
            if members.is_empty() {
                return Err(Error::InvalidInput(format!("simplex group {g} is empty")));
            }
            for &i in members {
                if i >= n {
                    return Err(Error::DimensionMismatch(format!(
                        "group {g} references column {i} of {n}"
                    )));
                }
                if group_of[i].is_some() {
                    return Err(Error::InvalidInput(format!(
                        "column {i} belongs to more than one simplex group"
                    )));
                }
                group_of[i] = Some(g);
            }
        }
        Ok(Self {
            design,
            target,
            smoothing,
            gamma,
            groups,
            group_of,
        })
    }

    pub fn n_vars(&self) -> usize {
        self.design.ncols()
    }

    pub fn design(&self) -> &DMatrix<f64> {
        &self.design
    }

    pub fn target(&self) -> &DVector<f64> {
        &self.target
    }

    pub fn smoothing(&self) -> &DMatrix<f64> {
        &self.smoothing
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn groups(&self) -> &[Vec<usize>] {
        &self.groups
    }

    /// Data misfit `||A x - b||²`.
    pub fn residual_norm_sq(&self, x: &[f64]) -> f64 {
        (&self.design * DVector::from_column_slice(x) - &self.target).norm_squared()
    }

    /// Penalty `||D x||²` (without γ).
    pub fn penalty_norm_sq(&self, x: &[f64]) -> f64 {
        (&self.smoothing * DVector::from_column_slice(x)).norm_squared()
    }

    pub fn objective(&self, x: &[f64]) -> f64 {
        self.residual_norm_sq(x) + self.gamma * self.penalty_norm_sq(x)
    }

    /// Euclidean projection onto the feasible set.
    pub fn project(&self, v: &[f64]) -> Vec<f64> {
        let mut x: Vec<f64> = v
            .iter()
            .zip(&self.group_of)
            .map(|(&vi, g)| if g.is_none() { vi.clamp(0.0, 1.0) } else { vi })
            .collect();
        for members in &self.groups {
            let sub: Vec<f64> = members.iter().map(|&i| v[i]).collect();
            let p = project_onto_simplex(&sub).expect("groups are nonempty");
            for (&i, pi) in members.iter().zip(p) {
                x[i] = pi;
            }
        }
        x
    }

    /// Largest violation of any constraint.
    pub fn infeasibility(&self, x: &[f64]) -> f64 {
        let mut worst = 0.0f64;
        for (i, &xi) in x.iter().enumerate() {
            worst = worst.max(-xi);
            if self.group_of[i].is_none() {
                worst = worst.max(xi - 1.0);
            }
        }
        for members in &self.groups {
            let s: f64 = members.iter().map(|&i| x[i]).sum();
            worst = worst.max((s - 1.0).abs());
        }
        worst
    }

    fn augmented(&self) -> (DMatrix<f64>, DVector<f64>) {
        let n = self.n_vars();
        let (ra, rd) = (self.design.nrows(), self.smoothing.nrows());
        let mut a = DMatrix::zeros(ra + rd, n);
        a.rows_mut(0, ra).copy_from(&self.design);
        if rd > 0 {
            a.rows_mut(ra, rd).copy_from(&(&self.smoothing * self.gamma.sqrt()));
        }
        let mut b = DVector::zeros(ra + rd);
        b.rows_mut(0, ra).copy_from(&self.target);
        (a, b)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolverOptions {
    pub tol: f64,
    pub max_iters: usize,
    /// Starting point; projected onto the feasible set. Defaults to the
    /// barycenter of each simplex and 0.5 for boxed entries.
    pub initial: Option<Vec<f64>>,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            tol: DEFAULT_TOL,
            max_iters: DEFAULT_MAX_ITERS,
            initial: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolverReport {
    pub solution: Vec<f64>,
    pub objective: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Projected-gradient norm `||P(x - ∇f) - x||` at the solution, with the
    /// objective scaled so its Hessian has unit spectral norm.
    pub kkt_residual: f64,
    /// Smallest eigenvalue of the Hessian `2 (AᵀA + γ DᵀD)`.
    pub min_hessian_eigenvalue: f64,
    /// The minimizer may be non-unique.
    pub rank_deficient: bool,
    /// Objective after each iteration, starting with the initial point.
    pub trace: Vec<f64>,
}

/// Euclidean projection onto `{x >= 0, sum x = 1}`.
pub fn project_onto_simplex(v: &[f64]) -> Result<Vec<f64>> {
    if v.is_empty() {
        return Err(Error::InvalidInput("cannot project an empty vector".into()));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("simplex projection input"));
    }
    let mut u = v.to_vec();
    u.sort_by(|a, b| b.total_cmp(a));
    let mut cumsum = 0.0;
    let mut tau = 0.0;
    for (j, &uj) in u.iter().enumerate() {
        cumsum += uj;
        let t = (cumsum - 1.0) / (j + 1) as f64;
        if uj - t > 0.0 {
            tau = t;
        }
    }
    // Entries that clear the threshold only by rounding error are zero.
    let mut x: Vec<f64> = v
        .iter()
        .map(|&vi| {
            let d = vi - tau;
            if d <= 4.0 * f64::EPSILON * vi.abs().max(tau.abs()).max(1.0) {
                0.0
            } else {
                d
            }
        })
        .collect();
    let s: f64 = x.iter().sum();
    for xi in &mut x {
        *xi /= s;
    }
    Ok(x)
}

/// Solves with the given tolerance and iteration budget.
pub fn solve_constrained_ls(
    problem: &QuadraticProblem,
    tol: f64,
    max_iters: usize,
) -> Result<SolverReport> {
    solve_with(
        problem,
        &SolverOptions {
            tol,
            max_iters,
            initial: None,
        },
    )
}

pub fn solve_with(problem: &QuadraticProblem, options: &SolverOptions) -> Result<SolverReport> {
    if !(options.tol.is_finite() && options.tol > 0.0) {
        return Err(Error::OutOfRange {
            name: "tol",
            value: options.tol,
            range: "(0, inf)",
        });
    }
    let n = problem.n_vars();
    let (a, b) = problem.augmented();
    let min_eig = 2.0 * SymmetricEigen::new(a.transpose() * &a).eigenvalues.min();

    // Work on the problem rescaled to a unit-norm Hessian, so that `tol`
    // bounds the projected gradient independently of how rows are weighted.
    let raw_lipschitz = 2.0 * power_iteration(&(a.transpose() * &a));
    let scale = if raw_lipschitz > 0.0 {
        (raw_lipschitz / 2.0).sqrt()
    } else {
        1.0
    };
    let a = a / scale;
    let b = b / scale;
    let at = a.transpose();
    let lipschitz = raw_lipschitz / (scale * scale);

    let objective = |x: &DVector<f64>| (&a * x - &b).norm_squared();
    let gradient = |x: &DVector<f64>| &at * (&a * x - &b) * 2.0;
    let pg_norm = |x: &DVector<f64>, g: &DVector<f64>| {
        let step: Vec<f64> = (x - g).iter().copied().collect();
        (DVector::from_vec(problem.project(&step)) - x).norm()
    };

    let start = match &options.initial {
        Some(x0) if x0.len() != n => {
            return Err(Error::DimensionMismatch(format!(
                "initial point has {} entries, problem has {n}",
                x0.len()
            )))
        }
        Some(x0) => problem.project(x0),
        None => {
            let mut x0 = vec![0.5; n];
            for members in &problem.groups {
                for &i in members {
                    x0[i] = 1.0 / members.len() as f64;
                }
            }
            x0
        }
    };
    let mut x = DVector::from_vec(start);
    let mut f = objective(&x);
    let mut trace = vec![f];
    let mut iterations = 0;
    let mut converged = false;

    let face_solver = FaceSolver {
        problem,
        a: &a,
        b: &b,
    };

    while iterations < options.max_iters {
        let before = x.clone();
        let g = gradient(&x);
        if pg_norm(&x, &g) <= options.tol {
            converged = true;
            break;
        }
        iterations += 1;

        let mut t = if lipschitz > 0.0 { 1.0 / lipschitz } else { 1.0 };
        loop {
            let trial: Vec<f64> = (&x - &g * t).iter().copied().collect();
            let xn = DVector::from_vec(problem.project(&trial));
            let fn_ = objective(&xn);
            if fn_ <= f + ARMIJO_SIGMA * g.dot(&(&xn - &x)) {
                if fn_ <= f {
                    x = xn;
                    f = fn_;
                }
                break;
            }
            t *= ARMIJO_SHRINK;
            if t < f64::MIN_POSITIVE {
                break;
            }
        }

        // Each pass either reaches the face minimizer or fixes one more
        // variable at a bound, so n + 1 passes always suffice.
        for _ in 0..=n {
            match face_solver.step(&x) {
                Some((xn, blocked)) => {
                    let fn_ = objective(&xn);
                    if fn_ <= f {
                        x = xn;
                        f = fn_;
                        if !blocked {
                            break;
                        }
                    } else {
                        break;
                    }
                }
                None => break,
            }
        }
        debug_assert!(f <= *trace.last().unwrap());
        trace.push(f);
        if x == before {
            // A fixed point at machine precision; more iterations cannot help.
            break;
        }
    }
    for t in &mut trace {
        *t *= scale * scale;
    }

    let solution: Vec<f64> = x.iter().copied().collect();
    let kkt_residual = pg_norm(&x, &gradient(&x));
    converged = converged || kkt_residual <= options.tol;
    if !f.is_finite() {
        return Err(Error::NonFinite("objective"));
    }
    Ok(SolverReport {
        objective: problem.objective(&solution),
        solution,
        iterations,
        converged,
        kkt_residual,
        min_hessian_eigenvalue: min_eig,
        rank_deficient: min_eig < RANK_DEFICIENCY_THRESHOLD,
        trace,
    })
}

fn power_iteration(h: &DMatrix<f64>) -> f64 {
    let mut v = DVector::from_element(h.ncols(), 1.0 / (h.ncols() as f64).sqrt());
    let mut lambda = 0.0;
    for _ in 0..POWER_ITERATIONS {
        let w = h * &v;
        let norm = w.norm();
        if norm == 0.0 {
            return 0.0;
        }
        lambda = v.dot(&w);
        v = w / norm;
    }
    // The Rayleigh quotient approaches from below; pad it slightly so 1/L is
    // a safe first step.
    lambda * 1.01
}

struct FaceSolver<'a> {
    problem: &'a QuadraticProblem,
    a: &'a DMatrix<f64>,
    b: &'a DVector<f64>,
}

impl FaceSolver<'_> {
    /// Minimizes over the face of `x` along a feasible ray. Returns the new
    /// point and whether a bound cut the step short.
    fn step(&self, x: &DVector<f64>) -> Option<(DVector<f64>, bool)> {
        let n = x.len();
        let mut basis: Vec<DVector<f64>> = Vec::new();
        for members in &self.problem.groups {
            let free: Vec<usize> = members.iter().copied().filter(|&i| x[i] > 0.0).collect();
            if let Some((&last, rest)) = free.split_last() {
                for &i in rest {
                    let mut z = DVector::zeros(n);
                    z[i] = 1.0;
                    z[last] = -1.0;
                    basis.push(z);
                }
            }
        }
        for i in 0..n {
            if self.problem.group_of[i].is_none() && x[i] > 0.0 && x[i] < 1.0 {
                let mut z = DVector::zeros(n);
                z[i] = 1.0;
                basis.push(z);
            }
        }
        if basis.is_empty() {
            return None;
        }
        let z = DMatrix::from_columns(&basis);
        let az = self.a * &z;
        let residual = self.b - self.a * x;
        let svd = SVD::new(az, true, true);
        let cutoff = svd.singular_values.max() * 1e-14;
        let y = svd.solve(&residual, cutoff).ok()?;
        let d = &z * y;
        if d.iter().any(|v| !v.is_finite()) || d.norm() == 0.0 {
            return None;
        }

        let mut alpha = 1.0f64;
        let mut blocking = None;
        for i in 0..n {
            let limit = if d[i] < 0.0 {
                x[i] / -d[i]
            } else if d[i] > 0.0 && self.problem.group_of[i].is_none() {
                (1.0 - x[i]) / d[i]
            } else {
                continue;
            };
            if limit < alpha {
                alpha = limit;
                blocking = Some(i);
            }
        }

        let mut xn = x + &d * alpha;
        if let Some(i) = blocking {
            xn[i] = if d[i] < 0.0 { 0.0 } else { 1.0 };
        }
        for i in 0..n {
            xn[i] = if self.problem.group_of[i].is_none() {
                xn[i].clamp(0.0, 1.0)
            } else {
                xn[i].max(0.0)
            };
        }
        for members in &self.problem.groups {
            let s: f64 = members.iter().map(|&i| xn[i]).sum();
            for &i in members {
                xn[i] /= s;
            }
        }
        Some((xn, blocking.is_some()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single_group(a: DMatrix<f64>, b: Vec<f64>) -> QuadraticProblem {
        let n = a.ncols();
        QuadraticProblem::new(a, DVector::from_vec(b), None, 0.0, vec![(0..n).collect()]).unwrap()
    }

    #[test]
    fn simplex_projection_examples() {
        assert_eq!(project_onto_simplex(&[0.8, 0.8]).unwrap(), vec![0.5, 0.5]);
        let p = project_onto_simplex(&[0.3, 0.7]).unwrap();
        assert!((p[0] - 0.3).abs() < 1e-15 && (p[1] - 0.7).abs() < 1e-15);
        assert_eq!(project_onto_simplex(&[1.2, 0.2]).unwrap(), vec![1.0, 0.0]);
        assert!(project_onto_simplex(&[]).is_err());
        assert!(project_onto_simplex(&[f64::NAN]).is_err());
    }

    #[test]
    fn identity_design_recovers_simplex_target() {
        let p = single_group(DMatrix::identity(3, 3), vec![0.2, 0.3, 0.5]);
        let r = solve_constrained_ls(&p, DEFAULT_TOL, DEFAULT_MAX_ITERS).unwrap();
        assert!(r.converged);
        assert!(r.objective < 1e-20);
        for (x, b) in r.solution.iter().zip([0.2, 0.3, 0.5]) {
            assert!((x - b).abs() < 1e-12);
        }
    }

    #[test]
    fn identity_design_projects_infeasible_target() {
        let p = single_group(DMatrix::identity(2, 2), vec![1.2, 0.2]);
        let r = solve_constrained_ls(&p, DEFAULT_TOL, DEFAULT_MAX_ITERS).unwrap();
        assert!(r.converged);
        assert!((r.solution[0] - 1.0).abs() < 1e-12);
        assert!(r.solution[1].abs() < 1e-12);
    }

    #[test]
    fn box_constrained_variables() {
        let p = QuadraticProblem::new(
            DMatrix::identity(3, 3),
            DVector::from_vec(vec![-0.5, 0.4, 1.7]),
            None,
            0.0,
            vec![],
        )
        .unwrap();
        let r = solve_constrained_ls(&p, DEFAULT_TOL, 1000).unwrap();
        assert!(r.converged);
        assert_eq!(r.solution[0], 0.0);
        assert!((r.solution[1] - 0.4).abs() < 1e-12);
        assert_eq!(r.solution[2], 1.0);
    }

    #[test]
    fn ill_conditioned_design_is_solved_exactly() {
        let etas: Vec<f64> = (0..20).map(|i| 0.01 + 0.01 * i as f64).collect();
        let a = DMatrix::from_fn(20, 6, |r, m| (1.0 - etas[r]).powi(m as i32));
        let truth = DVector::from_vec(vec![0.55, 0.3, 0.1, 0.03, 0.015, 0.005]);
        let b = &a * &truth;
        let p = QuadraticProblem::new(a, b, None, 0.0, vec![(0..6).collect()]).unwrap();
        let r = solve_constrained_ls(&p, DEFAULT_TOL, DEFAULT_MAX_ITERS).unwrap();
        assert!(r.converged, "kkt {}", r.kkt_residual);
        for (x, t) in r.solution.iter().zip(truth.iter()) {
            assert!((x - t).abs() < 1e-6, "{x} vs {t}");
        }
        assert!(r.rank_deficient);
        assert!(r.trace.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn validation() {
        let a = DMatrix::identity(2, 2);
        let b = DVector::from_vec(vec![0.5, 0.5]);
        assert!(QuadraticProblem::new(a.clone(), DVector::zeros(3), None, 0.0, vec![]).is_err());
        assert!(QuadraticProblem::new(a.clone(), b.clone(), None, -1.0, vec![]).is_err());
        assert!(QuadraticProblem::new(a.clone(), b.clone(), None, 0.0, vec![vec![0], vec![0, 1]]).is_err());
        assert!(QuadraticProblem::new(a.clone(), b.clone(), None, 0.0, vec![vec![2]]).is_err());
        let mut bad = a.clone();
        bad[(0, 0)] = f64::INFINITY;
        assert!(QuadraticProblem::new(bad, b.clone(), None, 0.0, vec![]).is_err());
        let p = QuadraticProblem::new(a, b, None, 0.0, vec![]).unwrap();
        assert!(solve_constrained_ls(&p, 0.0, 10).is_err());
    }

    #[test]
    fn exhausted_budget_is_reported() {
        let etas: Vec<f64> = (0..20).map(|i| 0.01 + 0.01 * i as f64).collect();
        let a = DMatrix::from_fn(20, 6, |r, m| (1.0 - etas[r]).powi(m as i32));
        let b = DVector::from_element(20, 0.7);
        let p = QuadraticProblem::new(a, b, None, 0.0, vec![(0..6).collect()]).unwrap();
        let r = solve_constrained_ls(&p, DEFAULT_TOL, 0).unwrap();
        assert!(!r.converged);
        assert_eq!(r.iterations, 0);
        assert!(r.kkt_residual > DEFAULT_TOL);
    }
}
