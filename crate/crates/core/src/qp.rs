//! Quadratic program at the heart of the weighting method:
//!
//! minimize ‖w − c‖² subject to |a_kᵀw| ≤ δ_k (k = 1..m), 1ᵀw = 1, w ≥ 0.
//!
//! Solved by an ADMM-style operator splitting where the simplex block
//! {1ᵀw = 1, w ≥ 0} is handled by an exact Euclidean projection and the
//! interval constraints by clamping, with a small Woodbury system for the
//! strongly convex primal update.

use nalgebra::{Cholesky, DMatrix, DVector};

/// Instance of the balancing QP.
///
/// `constraint_rows` is m×n; row k holds the per-unit products of standardized
/// covariate k and the standardized treatment, scaled by 1/n so that
/// `a_kᵀw` is the weighted correlation.
#[derive(Debug, Clone)]
pub struct QpProblem {
    pub target: DVector<f64>,
    pub constraint_rows: DMatrix<f64>,
    pub tolerance: DVector<f64>,
}

impl QpProblem {
    pub fn n(&self) -> usize {
        self.target.len()
    }

    pub fn m(&self) -> usize {
        self.constraint_rows.nrows()
    }

    fn validate(&self) {
        assert!(self.n() >= 2, "QP needs at least two units");
        assert_eq!(
            self.constraint_rows.ncols(),
            self.n(),
            "constraint rows must have n columns"
        );
        assert_eq!(
            self.tolerance.len(),
            self.m(),
            "one tolerance per constraint row"
        );
        assert!(
            self.tolerance.iter().all(|d| *d >= 0.0),
            "tolerances must be non-negative"
        );
        let sum: f64 = self.target.sum();
        assert!((sum - 1.0).abs() <= 1e-8, "target must sum to 1");
    }

    /// Objective value ‖w − c‖² at a candidate point.
    pub fn objective(&self, w: &DVector<f64>) -> f64 {
        (w - &self.target).norm_squared()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum SolveStatus {
    Optimal,
    Infeasible,
    MaxIterations,
}

#[derive(Debug, Clone)]
pub struct QpSolution {
    pub weights: DVector<f64>,
    pub status: SolveStatus,
    /// One signed multiplier per two-sided correlation constraint; positive
    /// when the upper bound binds, negative when the lower bound binds.
    pub duals_balance: DVector<f64>,
    pub dual_equality: f64,
    pub primal_residual: f64,
    pub dual_residual: f64,
    pub iterations: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct SolverSettings {
    pub max_iterations: usize,
    pub eps_primal: f64,
    pub eps_dual: f64,
    /// Number of iterations over which a stalled, bounded-away-from-feasible
    /// residual certifies infeasibility.
    pub infeasibility_window: usize,
}

impl Default for SolverSettings {
    fn default() -> Self {
        Self {
            max_iterations: 200_000,
            eps_primal: 1e-9,
            eps_dual: 1e-9,
            infeasibility_window: 1_000,
        }
    }
}

/// Euclidean projection onto the probability simplex {x : x ≥ 0, 1ᵀx = 1}.
/// Sort-based algorithm, O(n log n).
pub fn project_simplex(v: &DVector<f64>) -> DVector<f64> {
    let n = v.len();
    let mut sorted: Vec<f64> = v.iter().copied().collect();
    sorted.sort_by(|a, b| b.partial_cmp(a).expect("non-finite entry in projection"));
    let mut cumsum = 0.0;
    let mut theta = 0.0;
    for (i, &ui) in sorted.iter().enumerate() {
        cumsum += ui;
        let t = (cumsum - 1.0) / (i as f64 + 1.0);
        if ui - t > 0.0 {
            theta = t;
        } else {
            break;
        }
    }
    DVector::from_iterator(n, v.iter().map(|&vi| (vi - theta).max(0.0)))
}

struct WoodburySolver {
    alpha: f64,
    chol: Option<Cholesky<f64, nalgebra::Dyn>>,
}

impl WoodburySolver {
    fn new(gram: &DMatrix<f64>, rho: f64) -> Self {
        let alpha = 1.0 + rho;
        let m = gram.nrows();
        let chol = if m == 0 {
            None
        } else {
            // G = I/rho + gram/alpha, SPD for any rho > 0.
            let g = DMatrix::identity(m, m) / rho + gram / alpha;
            Some(g.cholesky().expect("Woodbury system must be SPD"))
        };
        Self { alpha, chol }
    }

    /// Solves ((1+rho) I + rho AᵀA) x = r.
    fn solve(&self, a: &DMatrix<f64>, r: &DVector<f64>) -> DVector<f64> {
        match &self.chol {
            None => r / self.alpha,
            Some(chol) => {
                let ar = a * r / self.alpha;
                let t = chol.solve(&ar);
                (r - a.transpose() * t) / self.alpha
            }
        }
    }
}

fn clamp_interval(v: &DVector<f64>, delta: &DVector<f64>) -> DVector<f64> {
    DVector::from_iterator(
        v.len(),
        v.iter()
            .zip(delta.iter())
            .map(|(&x, &d)| x.clamp(-d, d)),
    )
}

pub fn solve_qp(problem: &QpProblem, settings: &SolverSettings) -> QpSolution {
    problem.validate();
    assert!(settings.max_iterations >= 1);
    assert!(settings.eps_primal > 0.0 && settings.eps_dual > 0.0);

    let n = problem.n();
    let m = problem.m();
    let a = &problem.constraint_rows;
    let at = a.transpose();
    let c = &problem.target;
    let delta = &problem.tolerance;

    let gram = a * &at;
    let mut rho = 1.0;
    let mut solver = WoodburySolver::new(&gram, rho);

    let mut x = c.clone();
    let mut z_s = project_simplex(c);
    let mut z_b = clamp_interval(&(a * &x), delta);
    let mut u_s = DVector::zeros(n);
    let mut u_b = DVector::zeros(m);

    let mut status = SolveStatus::MaxIterations;
    let mut primal_residual = f64::INFINITY;
    let mut dual_residual = f64::INFINITY;
    let mut iterations = settings.max_iterations;

    // Stall detection over consecutive windows of the primal residual.
    let window = settings.infeasibility_window.max(1);
    let mut best_prev_window = f64::INFINITY;
    let mut best_curr_window = f64::INFINITY;

    for iter in 0..settings.max_iterations {
        let rhs = c + (&z_s - &u_s) * rho + &at * ((&z_b - &u_b) * rho);
        x = solver.solve(a, &rhs);
        let ax = a * &x;

        let z_s_prev = z_s.clone();
        let z_b_prev = z_b.clone();
        z_s = project_simplex(&(&x + &u_s));
        z_b = clamp_interval(&(&ax + &u_b), delta);
        u_s += &x - &z_s;
        u_b += &ax - &z_b;

        let rp_s = (&x - &z_s).amax();
        let rp_b = if m == 0 { 0.0 } else { (&ax - &z_b).amax() };
        primal_residual = rp_s.max(rp_b);
        let dz = (&z_s - &z_s_prev) + &at * (&z_b - &z_b_prev);
        dual_residual = rho * dz.amax();

        if primal_residual <= settings.eps_primal && dual_residual <= settings.eps_dual {
            // The reported weights are z_s, not x; make sure the balance
            // bound holds for z_s itself before declaring optimality, since
            // |a_kᵀ(x − z_s)| can exceed the per-entry splitting residual.
            let viol = if m == 0 {
                0.0
            } else {
                (a * &z_s)
                    .iter()
                    .zip(delta.iter())
                    .map(|(v, d)| (v.abs() - d).max(0.0))
                    .fold(0.0f64, f64::max)
            };
            if viol <= 5.0 * settings.eps_primal {
                status = SolveStatus::Optimal;
                iterations = iter + 1;
                break;
            }
        }

        best_curr_window = best_curr_window.min(primal_residual);
        if (iter + 1) % window == 0 {
            let stalled = best_curr_window > 0.999 * best_prev_window;
            let away_from_feasible = best_curr_window > 1e4 * settings.eps_primal;
            if stalled && away_from_feasible {
                status = SolveStatus::Infeasible;
                iterations = iter + 1;
                break;
            }
            best_prev_window = best_curr_window;
            best_curr_window = f64::INFINITY;
        }

        // Residual balancing keeps the two residuals within an order of
        // magnitude of each other; duals are rescaled so y = rho*u stays fixed.
        if (iter + 1) % 100 == 0 && dual_residual > 0.0 && primal_residual > 0.0 {
            let ratio = primal_residual / dual_residual;
            if ratio > 10.0 || ratio < 0.1 {
                let new_rho = (rho * ratio.sqrt()).clamp(1e-6, 1e6);
                if (new_rho / rho - 1.0).abs() > 1e-3 {
                    let scale = rho / new_rho;
                    u_s *= scale;
                    u_b *= scale;
                    rho = new_rho;
                    solver = WoodburySolver::new(&gram, rho);
                }
            }
        }
    }

    let (weights, duals_balance, dual_equality) = if status == SolveStatus::Optimal {
        // z_s is exactly on the simplex; clip any representation noise anyway.
        let mut w = z_s.clone();
        for wi in w.iter_mut() {
            if *wi < 0.0 {
                assert!(*wi >= -1e-10, "projection produced a negative weight");
                *wi = 0.0;
            }
        }
        let sum = w.sum();
        w /= sum;

        let y_s = &u_s * rho;
        // On strictly positive coordinates the nonnegativity dual vanishes,
        // so y_s there equals the equality multiplier.
        let mut nu_sum = 0.0;
        let mut nu_count = 0usize;
        for i in 0..n {
            if w[i] > 1e-9 {
                nu_sum += y_s[i];
                nu_count += 1;
            }
        }
        let nu = if nu_count > 0 { nu_sum / nu_count as f64 } else { 0.0 };
        (w, &u_b * rho, nu)
    } else {
        (z_s, &u_b * rho, 0.0)
    };

    QpSolution {
        weights,
        status,
        duals_balance,
        dual_equality,
        primal_residual,
        dual_residual,
        iterations,
    }
}

/// Optimality diagnostics for a solved instance.
#[derive(Debug, Clone, Copy)]
pub struct KktReport {
    pub stationarity: f64,
    pub primal_violation: f64,
    pub complementarity: f64,
    pub pass: bool,
}

/// Checks the KKT conditions of the QP at a claimed optimal point, using the
/// reported multipliers. The nonnegativity multiplier is recovered from
/// stationarity: mu = w − c + Aᵀλ + ν·1 must be ≥ 0 and complementary to w.
pub fn check_kkt(problem: &QpProblem, solution: &QpSolution, tol: f64) -> KktReport {
    assert!(tol > 0.0);
    assert_eq!(solution.status, SolveStatus::Optimal);
    let w = &solution.weights;
    let a = &problem.constraint_rows;
    let lambda = &solution.duals_balance;
    let nu = solution.dual_equality;

    let g = w - &problem.target
        + a.transpose() * lambda
        + DVector::from_element(problem.n(), nu);

    let mut stationarity = 0.0f64;
    let mut complementarity = 0.0f64;
    for i in 0..problem.n() {
        // g plays the role of mu; negative entries are stationarity defects.
        stationarity = stationarity.max(-g[i]);
        complementarity = complementarity.max((w[i] * g[i]).abs());
    }

    let aw = a * w;
    let mut primal_violation = (w.sum() - 1.0).abs();
    for i in 0..problem.n() {
        primal_violation = primal_violation.max(-w[i]);
    }
    for k in 0..problem.m() {
        let d = problem.tolerance[k];
        primal_violation = primal_violation.max(aw[k].abs() - d);
        // A positive multiplier must bind the upper bound, a negative one the
        // lower bound.
        let comp_k = lambda[k].max(0.0) * (d - aw[k]).abs()
            + (-lambda[k]).max(0.0) * (aw[k] + d).abs();
        complementarity = complementarity.max(comp_k);
    }

    let pass = stationarity <= tol && primal_violation <= tol && complementarity <= tol;
    KktReport {
        stationarity,
        primal_violation,
        complementarity,
        pass,
    }
}
