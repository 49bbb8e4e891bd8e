//! Robust orthogonality weights for marginal hazard ratio estimation.
//!
//! The crate solves a convex quadratic program that finds nonnegative,
//! unit-sum weights of minimal variance subject to bounds on the weighted
//! correlation between a treatment and each covariate, fits weighted Cox
//! proportional-hazards models with robust and bootstrap standard errors,
//! and ships a simulation harness for benchmarking the estimator against
//! naive, outcome-model, and parametric IPW comparators.

pub mod balance;
pub mod harness;
pub mod qp;
pub mod row;
pub mod simgen;
pub mod survival;

pub use harness::{
    marginal_theta, run_scenario, sweep, EstimatorKind, HarnessError, MetricRow, RunSettings,
    SweepAxis,
};
pub use qp::{check_kkt, solve_qp, KktReport, QpProblem, QpSolution, SolveStatus, SolverSettings};
pub use row::{
    build_problem, compute_row, escalate_delta, standardize, weighted_correlation, RowError,
    RowResult, StandardizedDesign,
};
pub use survival::{
    bootstrap_ci, fit_weighted_cox, partial_loglik, sandwich_se, weighted_km, BootstrapCi,
    CoxError, CoxFit, SurvivalSample,
};
