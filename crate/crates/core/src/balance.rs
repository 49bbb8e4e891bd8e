//! Balance diagnostics: absolute standardized mean differences for binary
//! treatments and absolute weighted correlations for continuous treatments,
//! with min/median/max summaries.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::row::{standardize, weighted_correlation, RowError};

#[derive(Debug, Error)]
pub enum BalanceError {
    #[error("treatment must be binary 0/1 with both groups nonempty")]
    EmptyGroup,
    #[error("weights must be non-negative and sum to a positive value")]
    BadWeights,
    #[error("dimension mismatch between covariates, treatment, and weights")]
    BadDimensions,
    #[error(transparent)]
    Standardize(#[from] RowError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MetricKind {
    Asmd,
    AbsCorrelation,
}

#[derive(Debug, Clone)]
pub struct BalanceReport {
    pub per_covariate: Vec<f64>,
    pub metric_kind: MetricKind,
    /// (min, median, max) of the per-covariate values; midpoint convention
    /// for even counts.
    pub summary: (f64, f64, f64),
    pub weighted: bool,
}

fn summarize(values: &[f64]) -> (f64, f64, f64) {
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite balance values"));
    let n = sorted.len();
    let median = if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    };
    (sorted[0], median, sorted[n - 1])
}

fn check_weights(w: &DVector<f64>, n: usize) -> Result<(), BalanceError> {
    if w.len() != n {
        return Err(BalanceError::BadDimensions);
    }
    if w.iter().any(|x| !x.is_finite() || *x < 0.0) || w.sum() <= 0.0 {
        return Err(BalanceError::BadWeights);
    }
    Ok(())
}

fn is_binary_column(col: impl Iterator<Item = f64>) -> bool {
    let mut any = false;
    for v in col {
        if v != 0.0 && v != 1.0 {
            return false;
        }
        any = true;
    }
    any
}

/// Absolute standardized mean difference per covariate for a binary
/// treatment. Continuous covariates divide by the unweighted pooled standard
/// deviation of the raw sample, held fixed across weighting schemes; binary
/// covariates report the raw difference in weighted means.
pub fn asmd(
    x: &DMatrix<f64>,
    a: &DVector<f64>,
    w: &DVector<f64>,
) -> Result<BalanceReport, BalanceError> {
    let n = x.nrows();
    if a.len() != n {
        return Err(BalanceError::BadDimensions);
    }
    check_weights(w, n)?;
    if a.iter().any(|v| *v != 0.0 && *v != 1.0) {
        return Err(BalanceError::EmptyGroup);
    }
    let treated: Vec<usize> = (0..n).filter(|&i| a[i] == 1.0).collect();
    let control: Vec<usize> = (0..n).filter(|&i| a[i] == 0.0).collect();
    if treated.is_empty() || control.is_empty() {
        return Err(BalanceError::EmptyGroup);
    }

    let w1: f64 = treated.iter().map(|&i| w[i]).sum();
    let w0: f64 = control.iter().map(|&i| w[i]).sum();
    if w1 <= 0.0 || w0 <= 0.0 {
        return Err(BalanceError::EmptyGroup);
    }

    let m = x.ncols();
    let mut values = Vec::with_capacity(m);
    for k in 0..m {
        let mu1: f64 = treated.iter().map(|&i| w[i] * x[(i, k)]).sum::<f64>() / w1;
        let mu0: f64 = control.iter().map(|&i| w[i] * x[(i, k)]).sum::<f64>() / w0;
        let diff = (mu1 - mu0).abs();
        if is_binary_column(x.column(k).iter().copied()) {
            values.push(diff);
        } else {
            // Unweighted group variances of the raw data (divisor n_g).
            let var_of = |idx: &[usize]| {
                let ng = idx.len() as f64;
                let mean: f64 = idx.iter().map(|&i| x[(i, k)]).sum::<f64>() / ng;
                idx.iter().map(|&i| (x[(i, k)] - mean).powi(2)).sum::<f64>() / ng
            };
            let pooled = (0.5 * (var_of(&treated) + var_of(&control))).sqrt();
            values.push(if pooled > 0.0 { diff / pooled } else { 0.0 });
        }
    }

    let summary = summarize(&values);
    Ok(BalanceReport {
        per_covariate: values,
        metric_kind: MetricKind::Asmd,
        summary,
        weighted: true,
    })
}

/// Absolute weighted correlation per covariate for a continuous treatment,
/// using the divisor-n standardized design so the uniform-weight value is the
/// Pearson correlation.
pub fn abs_corr(
    x: &DMatrix<f64>,
    a: &DVector<f64>,
    w: &DVector<f64>,
) -> Result<BalanceReport, BalanceError> {
    let n = x.nrows();
    check_weights(w, n)?;
    let design = standardize(x, a)?;
    let normalized = w / w.sum();
    let rho = weighted_correlation(&design, &normalized)?;
    let values: Vec<f64> = rho.iter().map(|r| r.abs()).collect();
    let summary = summarize(&values);
    Ok(BalanceReport {
        per_covariate: values,
        metric_kind: MetricKind::AbsCorrelation,
        summary,
        weighted: true,
    })
}
