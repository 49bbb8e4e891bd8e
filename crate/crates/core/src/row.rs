//! Assembly of the balancing QP from raw covariates and treatment:
//! standardization, constraint construction, and packaging of the solved
//! weights with duals and a balance summary.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::qp::{solve_qp, QpProblem, SolveStatus, SolverSettings};

#[derive(Debug, Error)]
pub enum RowError {
    #[error("covariate column {0} is constant; drop or recode it before weighting")]
    ConstantColumn(usize),
    #[error("treatment is constant; weighting is undefined")]
    ConstantTreatment,
    #[error("no feasible weights at delta = {delta}; increase delta and re-run")]
    Infeasible { delta: f64 },
    #[error("no feasible weights for any delta in the grid {tried:?}; increase delta further")]
    AllInfeasible { tried: Vec<f64> },
    #[error("solver hit the iteration limit without meeting tolerances")]
    MaxIterations,
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
}

/// Covariates and treatment centered and scaled to mean 0, variance 1 with
/// the population (divisor n) convention, so the uniform-weight correlation
/// is exactly the Pearson correlation.
#[derive(Debug, Clone)]
pub struct StandardizedDesign {
    pub x_std: DMatrix<f64>,
    pub a_std: DVector<f64>,
    pub means: Vec<f64>,
    pub sds: Vec<f64>,
    pub treatment_mean: f64,
    pub treatment_sd: f64,
}

impl StandardizedDesign {
    pub fn n(&self) -> usize {
        self.x_std.nrows()
    }

    pub fn m(&self) -> usize {
        self.x_std.ncols()
    }
}

#[derive(Debug, Clone)]
pub struct RowResult {
    pub weights: DVector<f64>,
    pub delta: f64,
    pub correlations_before: DVector<f64>,
    pub correlations_after: DVector<f64>,
    pub duals: DVector<f64>,
    pub solver_status: SolveStatus,
    pub effective_sample_size: f64,
    pub iterations: usize,
}

fn moments(values: impl Iterator<Item = f64> + Clone, n: usize) -> (f64, f64) {
    let mean = values.clone().sum::<f64>() / n as f64;
    let var = values.map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
    (mean, var)
}

/// Centers and scales each covariate column and the treatment (divisor-n
/// variance). Errors on constant columns, where the scale is undefined.
pub fn standardize(x: &DMatrix<f64>, a: &DVector<f64>) -> Result<StandardizedDesign, RowError> {
    let n = x.nrows();
    if a.len() != n {
        return Err(RowError::DimensionMismatch(format!(
            "x has {n} rows but treatment has {} entries",
            a.len()
        )));
    }
    assert!(n >= 2, "standardization needs at least two units");

    let m = x.ncols();
    let mut x_std = x.clone();
    let mut means = Vec::with_capacity(m);
    let mut sds = Vec::with_capacity(m);
    for k in 0..m {
        let (mean, var) = moments(x.column(k).iter().copied(), n);
        if var <= 0.0 {
            return Err(RowError::ConstantColumn(k));
        }
        let sd = var.sqrt();
        for i in 0..n {
            x_std[(i, k)] = (x[(i, k)] - mean) / sd;
        }
        means.push(mean);
        sds.push(sd);
    }

    let (a_mean, a_var) = moments(a.iter().copied(), n);
    if a_var <= 0.0 {
        return Err(RowError::ConstantTreatment);
    }
    let a_sd = a_var.sqrt();
    let a_std = DVector::from_iterator(n, a.iter().map(|&v| (v - a_mean) / a_sd));

    Ok(StandardizedDesign {
        x_std,
        a_std,
        means,
        sds,
        treatment_mean: a_mean,
        treatment_sd: a_sd,
    })
}

/// Weighted correlations (Σᵢ wᵢ x*ᵢₖ a*ᵢ)ₖ for a unit-sum weight vector.
pub fn weighted_correlation(
    design: &StandardizedDesign,
    w: &DVector<f64>,
) -> Result<DVector<f64>, RowError> {
    let n = design.n();
    if w.len() != n {
        return Err(RowError::DimensionMismatch(format!(
            "design has {n} units but weights has {} entries",
            w.len()
        )));
    }
    let m = design.m();
    let mut out = DVector::zeros(m);
    for k in 0..m {
        out[k] = (0..n).map(|i| w[i] * design.x_std[(i, k)] * design.a_std[i]).sum();
    }
    Ok(out)
}

/// Builds the QP instance for a standardized design and tolerance delta.
pub fn build_problem(design: &StandardizedDesign, delta: f64) -> QpProblem {
    let n = design.n();
    let m = design.m();
    let mut rows = DMatrix::zeros(m, n);
    for k in 0..m {
        for i in 0..n {
            rows[(k, i)] = design.x_std[(i, k)] * design.a_std[i];
        }
    }
    QpProblem {
        target: DVector::from_element(n, 1.0 / n as f64),
        constraint_rows: rows,
        tolerance: DVector::from_element(m, delta),
    }
}

/// Computes robust orthogonality weights: standardizes, solves the QP, and
/// reports the weights with duals, pre/post correlations, and the effective
/// sample size 1/Σw².
pub fn compute_row(
    x: &DMatrix<f64>,
    a: &DVector<f64>,
    delta: f64,
    settings: &SolverSettings,
) -> Result<RowResult, RowError> {
    assert!(delta >= 0.0, "delta must be non-negative");
    let design = standardize(x, a)?;
    let n = design.n();
    let problem = build_problem(&design, delta);
    let solution = solve_qp(&problem, settings);
    match solution.status {
        SolveStatus::Infeasible => return Err(RowError::Infeasible { delta }),
        SolveStatus::MaxIterations => return Err(RowError::MaxIterations),
        SolveStatus::Optimal => {}
    }

    let uniform = DVector::from_element(n, 1.0 / n as f64);
    let correlations_before = weighted_correlation(&design, &uniform)?;
    let correlations_after = weighted_correlation(&design, &solution.weights)?;
    let ess = 1.0 / solution.weights.iter().map(|w| w * w).sum::<f64>();

    Ok(RowResult {
        weights: solution.weights,
        delta,
        correlations_before,
        correlations_after,
        duals: solution.duals_balance,
        solver_status: solution.status,
        effective_sample_size: ess,
        iterations: solution.iterations,
    })
}

/// Retries `compute_row` over a strictly increasing tolerance grid, returning
/// the first feasible result along with the tolerances tried.
pub fn escalate_delta(
    x: &DMatrix<f64>,
    a: &DVector<f64>,
    delta_grid: &[f64],
    settings: &SolverSettings,
) -> Result<RowResult, RowError> {
    assert!(!delta_grid.is_empty(), "delta grid must be nonempty");
    assert!(
        delta_grid.windows(2).all(|p| p[0] < p[1]),
        "delta grid must be strictly increasing"
    );
    let mut tried = Vec::new();
    for &delta in delta_grid {
        tried.push(delta);
        match compute_row(x, a, delta, settings) {
            Ok(result) => return Ok(result),
            Err(RowError::Infeasible { .. }) => continue,
            Err(other) => return Err(other),
        }
    }
    Err(RowError::AllInfeasible { tried })
}
