//! Simulation harness: runs scenario grids end-to-end (generate, weight,
//! fit, score) for the ROW estimator and its comparators, aggregating
//! absolute bias, RMSE, coverage, balance, and timing into result tables.
//!
//! Comparators are the unadjusted ("naive") Cox fit, an outcome model that
//! conditions on the confounders, and parametric inverse-probability
//! weights: logistic-regression propensities for binary treatments and a
//! normal conditional density for continuous ones.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use thiserror::Error;

use crate::balance::{abs_corr, asmd, BalanceError};
use crate::qp::SolverSettings;
use crate::row::{escalate_delta, RowError};
use crate::simgen::{
    gen_censoring, gen_covariates, gen_covariates_gaussian, gen_event_times,
    gen_treatment_binary, gen_treatment_continuous, generate, substream, CovariateModel,
    GeneratedData, ScenarioConfig, TreatmentKind,
};
use crate::survival::{bootstrap_ci, fit_weighted_cox, sandwich_se, CoxError, SurvivalSample};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid scenario configuration: {0}")]
    BadConfig(String),
    #[error("perfect separation in the logistic propensity model")]
    Separation,
    #[error("treatment regression has zero residual variance")]
    ZeroResidualVariance,
    #[error("design matrix is rank-deficient")]
    SingularDesign,
    #[error("estimator failed on more than half of the replicates ({failed}/{total})")]
    TooManyFailures { failed: usize, total: usize },
    #[error("sweep grid must be nonempty")]
    EmptyGrid,
    #[error(transparent)]
    Row(#[from] RowError),
    #[error(transparent)]
    Cox(#[from] CoxError),
    #[error(transparent)]
    Balance(#[from] BalanceError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum EstimatorKind {
    /// ROW weights at the given correlation bound delta.
    Row { delta: f64 },
    /// Unadjusted Cox fit on the treatment alone.
    Naive,
    /// Cox model conditioning on confounders and treatment.
    OutcomeModel,
    /// Inverse probability of treatment by main-effects logistic regression.
    IpwBinaryLogistic { stabilized: bool },
    /// Inverse probability by a normal conditional density of the treatment.
    IpwContinuousNormal { stabilized: bool },
}

impl EstimatorKind {
    pub fn label(&self) -> String {
        match self {
            EstimatorKind::Row { delta } => format!("row(delta={delta})"),
            EstimatorKind::Naive => "naive".into(),
            EstimatorKind::OutcomeModel => "om".into(),
            EstimatorKind::IpwBinaryLogistic { stabilized } => {
                format!("ipw-logistic(stabilized={stabilized})")
            }
            EstimatorKind::IpwContinuousNormal { stabilized } => {
                format!("ipw-normal(stabilized={stabilized})")
            }
        }
    }
}

/// One row of the aggregated results table. Coverage and SE-ratio entries
/// are NaN when the corresponding standard error is not produced by the
/// estimator (e.g. no bootstrap requested).
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub scenario: String,
    pub estimator: String,
    pub replicates: usize,
    pub failures: usize,
    /// |mean theta-hat − theta| on the log-hazard scale.
    pub abs_bias_theta: f64,
    /// |mean HR-hat − exp(theta)| on the hazard-ratio scale.
    pub abs_bias_hr: f64,
    /// Root mean squared error of theta-hat.
    pub rmse: f64,
    /// Fraction of 95% intervals covering the scenario's true marginal log
    /// hazard ratio (see [`marginal_theta`]); NaN when the SE type is not
    /// produced by the estimator.
    pub coverage_naive: f64,
    pub coverage_robust: f64,
    pub coverage_boot: f64,
    /// Empirical SD of theta-hat divided by the mean reported SE.
    pub se_ratio_naive: f64,
    pub se_ratio_robust: f64,
    pub se_ratio_boot: f64,
    /// Mean over replicates of the worst per-covariate balance metric
    /// (max ASMD for binary treatments, max |correlation| for continuous).
    pub balance_summary: f64,
    /// Mean wall-clock seconds per replicate, excluding data generation.
    pub mean_time_seconds: f64,
}

#[derive(Debug, Clone)]
pub struct RunSettings {
    /// Bootstrap replicates per simulation replicate; 0 disables the
    /// bootstrap SE (only computed for the ROW estimator).
    pub bootstrap_reps: usize,
    pub solver: SolverSettings,
}

impl Default for RunSettings {
    fn default() -> Self {
        Self {
            bootstrap_reps: 0,
            solver: SolverSettings::default(),
        }
    }
}

/// Splitmix64-style mixing so replicate and grid-point seeds are decorrelated
/// while remaining a pure function of (seed, index).
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed
        .wrapping_add(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(index.wrapping_mul(0xBF58_476D_1CE4_E5B9));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn scenario_label(config: &ScenarioConfig) -> String {
    let treatment = match config.treatment_kind {
        TreatmentKind::Binary { gamma } => format!("binary(gamma={gamma})"),
        TreatmentKind::Continuous { eta } => format!("continuous(eta={eta})"),
    };
    let covariates = match config.covariate_model {
        CovariateModel::Mixed6 => "mixed6".to_string(),
        CovariateModel::GaussianIid { k } => format!("gaussian(k={k})"),
    };
    // Semicolon-separated so the label stays a single CSV field.
    format!(
        "n={};{};{};tau={};eps={}",
        config.n, covariates, treatment, config.tau, config.epsilon
    )
}

/// Fit a main-effects logistic regression of a binary treatment on the
/// covariates by Newton scoring. Returns the coefficient vector with the
/// intercept first.
pub fn logistic_fit(x: &DMatrix<f64>, a: &DVector<f64>) -> Result<DVector<f64>, HarnessError> {
    let n = x.nrows();
    let p = x.ncols() + 1;
    let z = DMatrix::from_fn(n, p, |i, j| if j == 0 { 1.0 } else { x[(i, j - 1)] });
    let mut beta = DVector::zeros(p);
    for _ in 0..100 {
        let eta = &z * &beta;
        let probs: Vec<f64> = eta.iter().map(|e| 1.0 / (1.0 + (-e).exp())).collect();
        let mut grad = DVector::zeros(p);
        let mut hess = DMatrix::zeros(p, p);
        for i in 0..n {
            let w = (probs[i] * (1.0 - probs[i])).max(1e-12);
            let resid = a[i] - probs[i];
            for j in 0..p {
                grad[j] += z[(i, j)] * resid;
                for k in j..p {
                    hess[(j, k)] += w * z[(i, j)] * z[(i, k)];
                }
            }
        }
        for j in 0..p {
            for k in 0..j {
                hess[(j, k)] = hess[(k, j)];
            }
        }
        if grad.amax() < 1e-10 {
            // A zero gradient with every label fitted exactly means the
            // likelihood is maximized only in the limit: (quasi-)separation.
            let perfect = (0..n).all(|i| (a[i] - probs[i]).abs() < 1e-6);
            if perfect {
                return Err(HarnessError::Separation);
            }
            return Ok(beta);
        }
        let chol = hess
            .clone()
            .cholesky()
            .ok_or(HarnessError::SingularDesign)?;
        beta += chol.solve(&grad);
        if beta.amax() > 1e3 {
            return Err(HarnessError::Separation);
        }
    }
    // Newton stalls without reaching a stationary point only when the MLE
    // diverges, i.e. the groups are (quasi-)separated.
    Err(HarnessError::Separation)
}

/// Inverse-probability weights for a binary treatment from a main-effects
/// logistic propensity model; propensities are clipped to [1e-6, 1-1e-6]
/// before inversion and the weights are normalized to sum to one.
pub fn estimate_ipw_binary(
    x: &DMatrix<f64>,
    a: &DVector<f64>,
    stabilized: bool,
) -> Result<DVector<f64>, HarnessError> {
    let n = x.nrows();
    if a.len() != n || n < 2 {
        return Err(HarnessError::BadConfig("dimension mismatch".into()));
    }
    if a.iter().any(|v| *v != 0.0 && *v != 1.0) {
        return Err(HarnessError::BadConfig("treatment must be binary".into()));
    }
    let treated: f64 = a.iter().sum();
    if treated == 0.0 || treated == n as f64 {
        return Err(HarnessError::BadConfig(
            "both treatment groups must be nonempty".into(),
        ));
    }
    let beta = logistic_fit(x, a)?;
    let prevalence = treated / n as f64;
    let mut w = DVector::zeros(n);
    for i in 0..n {
        let eta = beta[0]
            + (0..x.ncols())
                .map(|k| beta[k + 1] * x[(i, k)])
                .sum::<f64>();
        let pi = (1.0 / (1.0 + (-eta).exp())).clamp(1e-6, 1.0 - 1e-6);
        let numerator = if stabilized {
            if a[i] == 1.0 {
                prevalence
            } else {
                1.0 - prevalence
            }
        } else {
            1.0
        };
        w[i] = numerator / if a[i] == 1.0 { pi } else { 1.0 - pi };
    }
    let total = w.sum();
    Ok(w / total)
}

/// Ordinary least squares of the treatment on the covariates with an
/// intercept; returns (coefficients, residual variance with divisor n).
pub fn ols_fit(x: &DMatrix<f64>, a: &DVector<f64>) -> Result<(DVector<f64>, f64), HarnessError> {
    let n = x.nrows();
    let p = x.ncols() + 1;
    let z = DMatrix::from_fn(n, p, |i, j| if j == 0 { 1.0 } else { x[(i, j - 1)] });
    let gram = z.transpose() * &z;
    let rhs = z.transpose() * a;
    let chol = gram.cholesky().ok_or(HarnessError::SingularDesign)?;
    let beta = chol.solve(&rhs);
    let resid = a - &z * &beta;
    let sigma2 = resid.norm_squared() / n as f64;
    Ok((beta, sigma2))
}

fn normal_pdf(value: f64, mean: f64, variance: f64) -> f64 {
    let z = (value - mean) / variance.sqrt();
    (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI * variance).sqrt()
}

/// Inverse-probability weights for a continuous treatment assuming a normal
/// conditional density given the covariates (homoskedastic linear model).
/// The stabilized variant uses the marginal normal density of the treatment
/// as numerator; otherwise the numerator is 1.
pub fn estimate_ipw_continuous(
    x: &DMatrix<f64>,
    a: &DVector<f64>,
    stabilized: bool,
) -> Result<DVector<f64>, HarnessError> {
    let n = x.nrows();
    if a.len() != n || n < 2 {
        return Err(HarnessError::BadConfig("dimension mismatch".into()));
    }
    let (beta, sigma2) = ols_fit(x, a)?;
    let marginal_mean = a.sum() / n as f64;
    let marginal_var = a.iter().map(|v| (v - marginal_mean).powi(2)).sum::<f64>() / n as f64;
    if sigma2 <= 1e-12 * marginal_var.max(1.0) {
        return Err(HarnessError::ZeroResidualVariance);
    }
    let mut w = DVector::zeros(n);
    for i in 0..n {
        let fitted = beta[0]
            + (0..x.ncols())
                .map(|k| beta[k + 1] * x[(i, k)])
                .sum::<f64>();
        let denominator = normal_pdf(a[i], fitted, sigma2).max(1e-300);
        let numerator = if stabilized {
            normal_pdf(a[i], marginal_mean, marginal_var)
        } else {
            1.0
        };
        w[i] = numerator / denominator;
    }
    let total = w.sum();
    if !total.is_finite() || total <= 0.0 {
        return Err(HarnessError::ZeroResidualVariance);
    }
    Ok(w / total)
}

#[derive(Debug, Clone)]
pub struct OutcomeFit {
    /// Coefficient on the treatment column.
    pub theta: f64,
    pub se_naive: f64,
    pub loglik: f64,
    pub iterations: usize,
}

/// Multi-covariate weighted Cox partial-likelihood fit (Breslow ties) for
/// the outcome-model comparator: the design is [treatment, covariates] and
/// the reported coefficient and naive SE belong to the treatment.
pub fn fit_outcome_model(
    time: &[f64],
    event: &[bool],
    treatment: &[f64],
    x: &DMatrix<f64>,
    weights: &[f64],
) -> Result<OutcomeFit, HarnessError> {
    let n = time.len();
    if event.len() != n || treatment.len() != n || weights.len() != n || x.nrows() != n || n < 2 {
        return Err(HarnessError::Cox(CoxError::BadDimensions));
    }
    if time.iter().any(|t| !t.is_finite() || *t <= 0.0) {
        return Err(HarnessError::Cox(CoxError::NonPositiveTime));
    }
    let wsum: f64 = weights.iter().sum();
    if weights.iter().any(|w| !w.is_finite() || *w < 0.0) || wsum <= 0.0 {
        return Err(HarnessError::Cox(CoxError::BadWeights));
    }
    if !event.iter().any(|d| *d) {
        return Err(HarnessError::Cox(CoxError::NoEvents));
    }
    let p = x.ncols() + 1;
    // Rescale weights to mean one and center columns, as in the univariate
    // fit, for numerical stability and a software-convention naive SE.
    let w: Vec<f64> = weights.iter().map(|v| v * n as f64 / wsum).collect();
    let mut design = DMatrix::zeros(n, p);
    for i in 0..n {
        design[(i, 0)] = treatment[i];
        for k in 1..p {
            design[(i, k)] = x[(i, k - 1)];
        }
    }
    let mut wmeans = DVector::zeros(p);
    for k in 0..p {
        wmeans[k] = (0..n).map(|i| w[i] * design[(i, k)]).sum::<f64>() / n as f64;
    }
    for i in 0..n {
        for k in 0..p {
            design[(i, k)] -= wmeans[k];
        }
    }

    // Units sorted by descending time; risk sets accumulate as we walk down.
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| time[j].partial_cmp(&time[i]).unwrap().then(i.cmp(&j)));

    let evaluate = |beta: &DVector<f64>| -> (f64, DVector<f64>, DMatrix<f64>) {
        let mut loglik = 0.0;
        let mut grad = DVector::zeros(p);
        let mut hess = DMatrix::zeros(p, p);
        let mut s0 = 0.0;
        let mut s1 = DVector::zeros(p);
        let mut s2 = DMatrix::zeros(p, p);
        let mut idx = 0;
        while idx < n {
            let t = time[order[idx]];
            let mut group_end = idx;
            while group_end < n && time[order[group_end]] == t {
                group_end += 1;
            }
            for &i in &order[idx..group_end] {
                let zi = design.row(i).transpose();
                let risk = w[i] * (zi.dot(beta)).exp();
                s0 += risk;
                s1.axpy(risk, &zi, 1.0);
                s2.ger(risk, &zi, &zi, 1.0);
            }
            for &i in &order[idx..group_end] {
                if event[i] && w[i] > 0.0 && s0 > 0.0 {
                    let zi = design.row(i).transpose();
                    loglik += w[i] * (zi.dot(beta) - s0.ln());
                    let mean = &s1 / s0;
                    grad.axpy(w[i], &(&zi - &mean), 1.0);
                    let mut curv = &s2 / s0;
                    curv.ger(-1.0, &mean, &mean, 1.0);
                    hess += w[i] * curv;
                }
            }
            idx = group_end;
        }
        (loglik, grad, hess)
    };

    let mut beta = DVector::zeros(p);
    let (mut loglik, mut grad, mut hess) = evaluate(&beta);
    let mut iterations = 0;
    for iter in 1..=100 {
        iterations = iter;
        if grad.amax() < 1e-9 {
            break;
        }
        let chol = match hess.clone().cholesky() {
            Some(c) => c,
            None => return Err(HarnessError::Cox(CoxError::NonIdentifiable)),
        };
        let step = chol.solve(&grad);
        let mut scale = 1.0;
        let mut accepted = false;
        for _ in 0..40 {
            let candidate = &beta + scale * &step;
            let (ll, g, h) = evaluate(&candidate);
            if ll.is_finite() && ll >= loglik - 1e-12 {
                beta = candidate;
                loglik = ll;
                grad = g;
                hess = h;
                accepted = true;
                break;
            }
            scale *= 0.5;
        }
        if !accepted || step.amax() * scale < 1e-9 {
            break;
        }
        if beta.amax() > 50.0 {
            return Err(HarnessError::Cox(CoxError::MonotoneLikelihood));
        }
    }
    if grad.amax() > 1e-6 {
        return Err(HarnessError::Cox(CoxError::NotConverged));
    }
    let information = hess
        .cholesky()
        .ok_or(HarnessError::Cox(CoxError::NonIdentifiable))?;
    let covariance = information.inverse();
    Ok(OutcomeFit {
        theta: beta[0],
        se_naive: covariance[(0, 0)].sqrt(),
        loglik,
        iterations,
    })
}

/// True marginal log hazard ratio of a scenario, estimated by fitting an
/// unweighted Cox model to one large synthetic draw whose treatment vector
/// has been randomly permuted across units. The permutation preserves the
/// marginal treatment distribution while severing its dependence on the
/// covariates, so the fit targets the population-level (marginal) hazard
/// ratio that the weighting estimators estimate. With a conditional-hazard
/// generator this differs from `config.theta` whenever the outcome
/// coefficients are nonzero — noncollapsibility attenuates the marginal
/// effect even without confounding — which is why coverage is scored against
/// this value while bias is scored against `config.theta`.
pub fn marginal_theta(config: &ScenarioConfig, seed: u64) -> Result<f64, HarnessError> {
    const REFERENCE_N: usize = 200_000;
    let mut cov_rng = substream(seed, 0);
    let mut trt_rng = substream(seed, 1);
    let mut evt_rng = substream(seed, 2);
    let mut cen_rng = substream(seed, 3);
    let mut permute_rng = substream(seed, 4);

    let x = match config.covariate_model {
        CovariateModel::Mixed6 => gen_covariates(REFERENCE_N, &mut cov_rng),
        CovariateModel::GaussianIid { k } => {
            gen_covariates_gaussian(REFERENCE_N, k, &mut cov_rng)
        }
    };
    let mut a: Vec<f64> = match config.treatment_kind {
        TreatmentKind::Binary { gamma } => gen_treatment_binary(&x, gamma, &mut trt_rng),
        TreatmentKind::Continuous { eta } => gen_treatment_continuous(&x, eta, &mut trt_rng),
    }
    .iter()
    .copied()
    .collect();
    a.shuffle(&mut permute_rng);
    let a = DVector::from_vec(a);

    let reference = ScenarioConfig {
        n: REFERENCE_N,
        ..config.clone()
    };
    let t_event = gen_event_times(&a, &x, &reference, &mut evt_rng);
    let c = gen_censoring(REFERENCE_N, config.epsilon, &mut cen_rng);
    let y: Vec<f64> = t_event.iter().zip(&c).map(|(&t, &ci)| t.min(ci)).collect();
    let delta: Vec<bool> = t_event.iter().zip(&c).map(|(&t, &ci)| t < ci).collect();
    let sample = SurvivalSample::new(
        y,
        delta,
        a.iter().copied().collect(),
        vec![1.0; REFERENCE_N],
    )?;
    Ok(fit_weighted_cox(&sample)?.theta)
}

/// Everything recorded for one (replicate, estimator) cell.
#[derive(Debug, Clone)]
struct RepOutcome {
    theta: f64,
    se_naive: f64,
    se_robust: f64,
    se_boot: f64,
    max_balance: f64,
    seconds: f64,
}

fn max_balance_metric(
    data: &GeneratedData,
    weights: &DVector<f64>,
    binary: bool,
) -> Result<f64, HarnessError> {
    let report = if binary {
        asmd(&data.x_observed, &data.a, weights)?
    } else {
        abs_corr(&data.x_observed, &data.a, weights)?
    };
    Ok(report.summary.2)
}

fn run_estimator(
    estimator: &EstimatorKind,
    data: &GeneratedData,
    binary: bool,
    rep_seed: u64,
    settings: &RunSettings,
) -> Result<RepOutcome, HarnessError> {
    let n = data.y.len();
    let start = Instant::now();
    let outcome = match estimator {
        EstimatorKind::OutcomeModel => {
            let treatment: Vec<f64> = data.a.iter().copied().collect();
            let fit = fit_outcome_model(
                &data.y,
                &data.delta,
                &treatment,
                &data.x_observed,
                &vec![1.0; n],
            )?;
            let uniform = DVector::from_element(n, 1.0 / n as f64);
            RepOutcome {
                theta: fit.theta,
                se_naive: fit.se_naive,
                se_robust: f64::NAN,
                se_boot: f64::NAN,
                max_balance: max_balance_metric(data, &uniform, binary)?,
                seconds: 0.0,
            }
        }
        _ => {
            let weights = match estimator {
                EstimatorKind::Naive => DVector::from_element(n, 1.0 / n as f64),
                EstimatorKind::Row { delta } => {
                    let grid = [*delta, 10.0 * delta, 100.0 * delta];
                    escalate_delta(&data.x_observed, &data.a, &grid, &settings.solver)?.weights
                }
                EstimatorKind::IpwBinaryLogistic { stabilized } => {
                    estimate_ipw_binary(&data.x_observed, &data.a, *stabilized)?
                }
                EstimatorKind::IpwContinuousNormal { stabilized } => {
                    estimate_ipw_continuous(&data.x_observed, &data.a, *stabilized)?
                }
                EstimatorKind::OutcomeModel => unreachable!(),
            };
            let sample = SurvivalSample::new(
                data.y.clone(),
                data.delta.clone(),
                data.a.iter().copied().collect(),
                weights.iter().copied().collect(),
            )?;
            let fit = fit_weighted_cox(&sample)?;
            let se_robust = sandwich_se(&sample, &fit)?;
            let se_boot = match estimator {
                EstimatorKind::Row { delta } if settings.bootstrap_reps >= 2 => {
                    let event = &data.delta;
                    let treatment: Vec<f64> = data.a.iter().copied().collect();
                    bootstrap_ci(
                        &data.y,
                        event,
                        &treatment,
                        &data.x_observed,
                        *delta,
                        settings.bootstrap_reps,
                        rep_seed,
                        &settings.solver,
                    )?
                    .se_boot
                }
                _ => f64::NAN,
            };
            RepOutcome {
                theta: fit.theta,
                se_naive: fit.se_naive,
                se_robust,
                se_boot,
                max_balance: max_balance_metric(data, &weights, binary)?,
                seconds: 0.0,
            }
        }
    };
    Ok(RepOutcome {
        seconds: start.elapsed().as_secs_f64(),
        ..outcome
    })
}

fn aggregate(
    scenario: &str,
    estimator: &EstimatorKind,
    theta_true: f64,
    theta_marginal: f64,
    cells: &[Result<RepOutcome, HarnessError>],
) -> Result<MetricRow, HarnessError> {
    let total = cells.len();
    let successes: Vec<&RepOutcome> = cells.iter().filter_map(|c| c.as_ref().ok()).collect();
    let failed = total - successes.len();
    if failed * 2 > total {
        return Err(HarnessError::TooManyFailures { failed, total });
    }
    let m = successes.len() as f64;
    let mean_theta = successes.iter().map(|r| r.theta).sum::<f64>() / m;
    let mean_hr = successes.iter().map(|r| r.theta.exp()).sum::<f64>() / m;
    let bias = mean_theta - theta_true;
    let variance = successes
        .iter()
        .map(|r| (r.theta - mean_theta).powi(2))
        .sum::<f64>()
        / m;
    // bias² + variance keeps the rmse ≥ |bias| identity exact in floats.
    let rmse = (bias * bias + variance).sqrt();
    let sd = if successes.len() > 1 {
        (variance * m / (m - 1.0)).sqrt()
    } else {
        f64::NAN
    };

    let coverage_and_ratio = |se_of: &dyn Fn(&RepOutcome) -> f64| -> (f64, f64) {
        let ses: Vec<f64> = successes.iter().map(|r| se_of(r)).collect();
        if ses.iter().any(|s| s.is_nan()) {
            return (f64::NAN, f64::NAN);
        }
        let covered = successes
            .iter()
            .zip(&ses)
            .filter(|(r, se)| (r.theta - theta_marginal).abs() <= 1.959963984540054 * **se)
            .count();
        let mean_se = ses.iter().sum::<f64>() / m;
        (covered as f64 / m, sd / mean_se)
    };
    let (coverage_naive, se_ratio_naive) = coverage_and_ratio(&|r| r.se_naive);
    let (coverage_robust, se_ratio_robust) = coverage_and_ratio(&|r| r.se_robust);
    let (coverage_boot, se_ratio_boot) = coverage_and_ratio(&|r| r.se_boot);

    Ok(MetricRow {
        scenario: scenario.to_string(),
        estimator: estimator.label(),
        replicates: total,
        failures: failed,
        abs_bias_theta: bias.abs(),
        abs_bias_hr: (mean_hr - theta_true.exp()).abs(),
        rmse,
        coverage_naive,
        coverage_robust,
        coverage_boot,
        se_ratio_naive,
        se_ratio_robust,
        se_ratio_boot,
        balance_summary: successes.iter().map(|r| r.max_balance).sum::<f64>() / m,
        mean_time_seconds: successes.iter().map(|r| r.seconds).sum::<f64>() / m,
    })
}

/// Run one scenario for a list of estimators over independent replicates.
/// Each replicate draws a fresh dataset from a seed derived from
/// (seed, replicate index); every estimator sees the same dataset within a
/// replicate. Estimation consumes the analyst's (possibly misspecified)
/// covariate view.
pub fn run_scenario(
    config: &ScenarioConfig,
    estimators: &[EstimatorKind],
    replicates: usize,
    seed: u64,
    settings: &RunSettings,
) -> Result<Vec<MetricRow>, HarnessError> {
    config.validate().map_err(HarnessError::BadConfig)?;
    assert!(replicates >= 1, "at least one replicate is required");
    let binary = config.treatment_kind.is_binary();
    for estimator in estimators {
        let compatible = match estimator {
            EstimatorKind::IpwBinaryLogistic { .. } => binary,
            EstimatorKind::IpwContinuousNormal { .. } => !binary,
            EstimatorKind::Row { delta } => {
                if *delta <= 0.0 {
                    return Err(HarnessError::BadConfig("ROW delta must be positive".into()));
                }
                true
            }
            _ => true,
        };
        if !compatible {
            return Err(HarnessError::BadConfig(format!(
                "estimator {} does not match the treatment type",
                estimator.label()
            )));
        }
    }

    // Coverage target: the scenario's true marginal effect, from a fixed
    // derived seed outside the replicate index range for determinism.
    let theta_marginal = marginal_theta(config, derive_seed(seed, u64::MAX))?;

    let cells: Vec<Vec<Result<RepOutcome, HarnessError>>> = (0..replicates)
        .into_par_iter()
        .map(|r| {
            let rep_seed = derive_seed(seed, r as u64);
            let mut rep_config = config.clone();
            rep_config.seed = rep_seed;
            let data = generate(&rep_config);
            estimators
                .iter()
                .map(|e| run_estimator(e, &data, binary, rep_seed, settings))
                .collect()
        })
        .collect();

    let label = scenario_label(config);
    estimators
        .iter()
        .enumerate()
        .map(|(j, estimator)| {
            let column: Vec<Result<RepOutcome, HarnessError>> = cells
                .iter()
                .map(|row| match &row[j] {
                    Ok(v) => Ok(v.clone()),
                    Err(e) => Err(HarnessError::BadConfig(e.to_string())),
                })
                .collect();
            aggregate(&label, estimator, config.theta, theta_marginal, &column)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepAxis {
    /// Varies gamma (binary) or eta (continuous).
    Positivity,
    /// Varies tau.
    Misspecification,
    /// Varies epsilon.
    Censoring,
    /// Varies n, switching to the 4-confounder i.i.d. Gaussian population
    /// with outcome coefficients 1.4.
    SampleSize,
    /// Varies the confounder count K of the i.i.d. Gaussian population with
    /// outcome coefficients 0.1.
    NumConfounders,
}

fn config_at(axis: SweepAxis, value: f64, base: &ScenarioConfig) -> ScenarioConfig {
    let mut config = base.clone();
    match axis {
        SweepAxis::Positivity => {
            config.treatment_kind = match config.treatment_kind {
                TreatmentKind::Binary { .. } => TreatmentKind::Binary { gamma: value },
                TreatmentKind::Continuous { .. } => TreatmentKind::Continuous { eta: value },
            };
        }
        SweepAxis::Misspecification => config.tau = value,
        SweepAxis::Censoring => config.epsilon = value,
        SweepAxis::SampleSize | SweepAxis::NumConfounders => {
            // The auxiliary sweeps use an i.i.d. Gaussian population under a
            // moderate positivity violation, no misspecification, and no
            // censoring; only the axis parameter varies.
            let (k, n, coef) = if axis == SweepAxis::SampleSize {
                (4, value.round() as usize, 1.4)
            } else {
                (value.round() as usize, config.n, 0.1)
            };
            config.covariate_model = CovariateModel::GaussianIid { k };
            config.beta = vec![coef; k];
            config.n = n;
            config.tau = 0.0;
            config.epsilon = 0.0;
            config.treatment_kind = match config.treatment_kind {
                TreatmentKind::Binary { .. } => TreatmentKind::Binary { gamma: 1.0 },
                TreatmentKind::Continuous { .. } => TreatmentKind::Continuous { eta: 0.6 },
            };
        }
    }
    config
}

/// One run_scenario per grid point, varying only the axis parameter.
pub fn sweep(
    axis: SweepAxis,
    grid: &[f64],
    base: &ScenarioConfig,
    estimators: &[EstimatorKind],
    replicates: usize,
    seed: u64,
    settings: &RunSettings,
) -> Result<Vec<MetricRow>, HarnessError> {
    if grid.is_empty() {
        return Err(HarnessError::EmptyGrid);
    }
    let mut rows = Vec::with_capacity(grid.len() * estimators.len());
    for (idx, &value) in grid.iter().enumerate() {
        let config = config_at(axis, value, base);
        let point_seed = derive_seed(seed, (idx as u64) << 32);
        let mut point = run_scenario(&config, estimators, replicates, point_seed, settings)?;
        for row in &mut point {
            row.scenario = format!("{:?}={value};{}", axis, row.scenario);
        }
        rows.append(&mut point);
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::prelude::*;
    use rand_chacha::ChaCha12Rng;

    fn binary_config(n: usize) -> ScenarioConfig {
        ScenarioConfig {
            n,
            ..ScenarioConfig::default()
        }
    }

    #[test]
    fn logistic_fit_matches_irls_oracle() {
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        let n = 100;
        let x = DMatrix::from_fn(n, 2, |_, _| rng.sample::<f64, _>(rand_distr::StandardNormal));
        let a = DVector::from_fn(n, |i, _| {
            let eta = 0.3 + 0.8 * x[(i, 0)] - 0.5 * x[(i, 1)];
            let p = 1.0 / (1.0 + (-eta as f64).exp());
            if rng.gen::<f64>() < p {
                1.0
            } else {
                0.0
            }
        });
        let fitted = logistic_fit(&x, &a).unwrap();

        // Independent IRLS oracle: repeated weighted least squares on the
        // working response, solved by naive Gaussian elimination.
        let p = 3;
        let z = DMatrix::from_fn(n, p, |i, j| if j == 0 { 1.0 } else { x[(i, j - 1)] });
        let mut beta = vec![0.0; p];
        for _ in 0..60 {
            let mut normal = vec![vec![0.0; p + 1]; p];
            for i in 0..n {
                let eta: f64 = (0..p).map(|j| z[(i, j)] * beta[j]).sum();
                let prob = 1.0 / (1.0 + (-eta).exp());
                let wt = (prob * (1.0 - prob)).max(1e-12);
                let working = eta + (a[i] - prob) / wt;
                for j in 0..p {
                    for k in 0..p {
                        normal[j][k] += wt * z[(i, j)] * z[(i, k)];
                    }
                    normal[j][p] += wt * z[(i, j)] * working;
                }
            }
            for col in 0..p {
                let pivot = normal[col][col];
                for k in col..=p {
                    normal[col][k] /= pivot;
                }
                for row in 0..p {
                    if row != col {
                        let factor = normal[row][col];
                        for k in col..=p {
                            normal[row][k] -= factor * normal[col][k];
                        }
                    }
                }
            }
            for j in 0..p {
                beta[j] = normal[j][p];
            }
        }
        for j in 0..p {
            assert_abs_diff_eq!(fitted[j], beta[j], epsilon = 1e-8);
        }
    }

    #[test]
    fn perfect_separation_is_reported() {
        let x = DMatrix::from_column_slice(8, 1, &[-4.0, -3.0, -2.0, -1.0, 1.0, 2.0, 3.0, 4.0]);
        let a = DVector::from_row_slice(&[0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0]);
        assert!(matches!(
            estimate_ipw_binary(&x, &a, false),
            Err(HarnessError::Separation)
        ));
    }

    #[test]
    fn uninformative_covariates_give_near_uniform_ipw() {
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let n = 4000;
        let x = DMatrix::from_fn(n, 2, |_, _| rng.sample::<f64, _>(rand_distr::StandardNormal));
        let a = DVector::from_fn(n, |_, _| if rng.gen::<f64>() < 0.5 { 1.0 } else { 0.0 });
        let w = estimate_ipw_binary(&x, &a, true).unwrap();
        let uniform = 1.0 / n as f64;
        for v in w.iter() {
            assert!((v / uniform - 1.0).abs() < 0.25, "weight {v} vs {uniform}");
        }
    }

    #[test]
    fn continuous_ipw_density_matches_pdf_formula() {
        let mut rng = ChaCha12Rng::seed_from_u64(9);
        let n = 120;
        let x = DMatrix::from_fn(n, 2, |_, _| rng.sample::<f64, _>(rand_distr::StandardNormal));
        let a = DVector::from_fn(n, |i, _| {
            1.0 + 0.5 * x[(i, 0)] - 0.2 * x[(i, 1)]
                + 0.7 * rng.sample::<f64, _>(rand_distr::StandardNormal)
        });
        let w = estimate_ipw_continuous(&x, &a, false).unwrap();
        let (beta, sigma2) = ols_fit(&x, &a).unwrap();
        // Unstabilized weights are proportional to the reciprocal of the
        // fitted conditional density; check the density at 20 points.
        let mut ratio = None;
        for i in 0..20 {
            let fitted = beta[0] + beta[1] * x[(i, 0)] + beta[2] * x[(i, 1)];
            let density = (-0.5 * (a[i] - fitted).powi(2) / sigma2).exp()
                / (2.0 * std::f64::consts::PI * sigma2).sqrt();
            let product = w[i] * density;
            match ratio {
                None => ratio = Some(product),
                Some(r) => assert_abs_diff_eq!(product, r, epsilon = 1e-12 * r.abs()),
            }
        }
    }

    #[test]
    fn continuous_ipw_shrinks_treatment_covariate_correlation() {
        let mut rng = ChaCha12Rng::seed_from_u64(21);
        let n = 3000;
        let x = DMatrix::from_fn(n, 1, |_, _| rng.sample::<f64, _>(rand_distr::StandardNormal));
        let a = DVector::from_fn(n, |i, _| {
            x[(i, 0)] + rng.sample::<f64, _>(rand_distr::StandardNormal)
        });
        let w = estimate_ipw_continuous(&x, &a, true).unwrap();
        let uniform = DVector::from_element(n, 1.0 / n as f64);
        let before = abs_corr(&x, &a, &uniform).unwrap().summary.2;
        let after = abs_corr(&x, &a, &w).unwrap().summary.2;
        assert!(after < before, "after {after} vs before {before}");
    }

    #[test]
    fn zero_residual_variance_is_reported() {
        let x = DMatrix::from_column_slice(5, 1, &[1.0, 2.0, 3.0, 4.0, 5.0]);
        let a = DVector::from_fn(5, |i, _| 2.0 * x[(i, 0)] + 1.0);
        assert!(matches!(
            estimate_ipw_continuous(&x, &a, false),
            Err(HarnessError::ZeroResidualVariance)
        ));
    }

    #[test]
    fn outcome_model_with_no_covariates_matches_univariate_fit() {
        let time = vec![3.0, 1.0, 4.0, 1.5, 9.0, 2.6, 5.3, 5.8];
        let event = vec![true, true, false, true, true, false, true, true];
        let treatment = vec![1.0, 0.0, 1.0, 0.0, 1.0, 1.0, 0.0, 0.0];
        let x = DMatrix::<f64>::zeros(8, 0);
        let w = vec![1.0; 8];
        let fit = fit_outcome_model(&time, &event, &treatment, &x, &w).unwrap();
        let sample =
            SurvivalSample::new(time.clone(), event.clone(), treatment.clone(), w.clone()).unwrap();
        let reference = fit_weighted_cox(&sample).unwrap();
        assert_abs_diff_eq!(fit.theta, reference.theta, epsilon = 1e-8);
        assert_abs_diff_eq!(fit.se_naive, reference.se_naive, epsilon = 1e-8);
    }

    #[test]
    fn outcome_model_matches_coordinate_grid_oracle() {
        let time = vec![2.0, 5.0, 1.0, 7.0, 3.0, 4.0];
        let event = vec![true, true, true, false, true, true];
        let treatment = vec![0.0, 1.0, 0.0, 1.0, 1.0, 0.0];
        let x = DMatrix::from_column_slice(6, 1, &[0.4, -1.1, 0.9, 0.3, -0.2, 1.5]);
        let w = vec![1.0; 6];
        let fit = fit_outcome_model(&time, &event, &treatment, &x, &w).unwrap();

        // Coordinate-wise grid refinement of the Breslow partial likelihood.
        let loglik = |theta: f64, b: f64| -> f64 {
            let mut order: Vec<usize> = (0..6).collect();
            order.sort_by(|&i, &j| time[j].partial_cmp(&time[i]).unwrap());
            let mut s0 = 0.0;
            let mut total = 0.0;
            let mut idx = 0;
            while idx < 6 {
                let t = time[order[idx]];
                let mut end = idx;
                while end < 6 && time[order[end]] == t {
                    end += 1;
                }
                for &i in &order[idx..end] {
                    s0 += (theta * treatment[i] + b * x[(i, 0)]).exp();
                }
                for &i in &order[idx..end] {
                    if event[i] {
                        total += theta * treatment[i] + b * x[(i, 0)] - s0.ln();
                    }
                }
                idx = end;
            }
            total
        };
        let mut best = (0.0, 0.0);
        let mut width = 4.0;
        for _ in 0..30 {
            let mut improved = best;
            let mut best_ll = loglik(best.0, best.1);
            for i in -8..=8 {
                for j in -8..=8 {
                    let cand = (
                        best.0 + width * i as f64 / 8.0,
                        best.1 + width * j as f64 / 8.0,
                    );
                    let ll = loglik(cand.0, cand.1);
                    if ll > best_ll {
                        best_ll = ll;
                        improved = cand;
                    }
                }
            }
            best = improved;
            width *= 0.5;
        }
        assert_abs_diff_eq!(fit.theta, best.0, epsilon = 1e-3);
    }

    #[test]
    fn naive_estimator_is_unbiased_without_confounding() {
        let config = ScenarioConfig {
            beta: vec![0.0; 6],
            ..binary_config(600)
        };
        let rows = run_scenario(
            &config,
            &[EstimatorKind::Naive],
            150,
            42,
            &RunSettings::default(),
        )
        .unwrap();
        let row = &rows[0];
        // Monte Carlo SE of the mean is roughly rmse/sqrt(replicates).
        let mc_se = row.rmse / (150f64).sqrt();
        assert!(
            row.abs_bias_theta < 3.0 * mc_se + 0.01,
            "bias {} vs MC SE {mc_se}",
            row.abs_bias_theta
        );
        assert_eq!(row.failures, 0);
        assert!(row.rmse >= row.abs_bias_theta);
    }

    #[test]
    fn identical_inputs_give_identical_rows() {
        let config = binary_config(250);
        let estimators = [
            EstimatorKind::Naive,
            EstimatorKind::Row { delta: 0.02 },
            EstimatorKind::IpwBinaryLogistic { stabilized: true },
        ];
        let settings = RunSettings::default();
        let a = run_scenario(&config, &estimators, 20, 7, &settings).unwrap();
        let b = run_scenario(&config, &estimators, 20, 7, &settings).unwrap();
        for (left, right) in a.iter().zip(&b) {
            assert_eq!(left.scenario, right.scenario);
            assert_eq!(left.estimator, right.estimator);
            assert_eq!(left.abs_bias_theta.to_bits(), right.abs_bias_theta.to_bits());
            assert_eq!(left.rmse.to_bits(), right.rmse.to_bits());
            assert_eq!(
                left.balance_summary.to_bits(),
                right.balance_summary.to_bits()
            );
        }
    }

    #[test]
    fn row_balance_respects_the_correlation_bound() {
        let config = ScenarioConfig {
            treatment_kind: TreatmentKind::Continuous { eta: 0.6 },
            ..binary_config(300)
        };
        let delta = 0.1;
        let rows = run_scenario(
            &config,
            &[EstimatorKind::Row { delta }],
            20,
            3,
            &RunSettings::default(),
        )
        .unwrap();
        assert_eq!(rows[0].failures, 0);
        assert!(
            rows[0].balance_summary <= delta + 1e-8,
            "balance {}",
            rows[0].balance_summary
        );
    }

    #[test]
    fn mismatched_estimator_and_treatment_is_rejected() {
        let config = binary_config(100);
        let err = run_scenario(
            &config,
            &[EstimatorKind::IpwContinuousNormal { stabilized: false }],
            5,
            0,
            &RunSettings::default(),
        )
        .unwrap_err();
        assert!(matches!(err, HarnessError::BadConfig(_)));
    }

    #[test]
    fn single_point_sweep_matches_run_scenario() {
        let base = binary_config(200);
        let settings = RunSettings::default();
        let estimators = [EstimatorKind::Naive];
        let swept = sweep(
            SweepAxis::Misspecification,
            &[0.5],
            &base,
            &estimators,
            15,
            99,
            &settings,
        )
        .unwrap();
        let config = config_at(SweepAxis::Misspecification, 0.5, &base);
        let direct =
            run_scenario(&config, &estimators, 15, derive_seed(99, 0), &settings).unwrap();
        assert_eq!(swept[0].abs_bias_theta.to_bits(), direct[0].abs_bias_theta.to_bits());
        assert_eq!(swept[0].rmse.to_bits(), direct[0].rmse.to_bits());
    }

    #[test]
    fn sample_size_axis_switches_to_the_gaussian_population() {
        let config = config_at(SweepAxis::SampleSize, 250.0, &binary_config(100));
        assert_eq!(config.covariate_model, CovariateModel::GaussianIid { k: 4 });
        assert_eq!(config.n, 250);
        assert_eq!(config.beta, vec![1.4; 4]);
        assert_eq!(config.epsilon, 0.0);
        let confounders = config_at(SweepAxis::NumConfounders, 10.0, &binary_config(100));
        assert_eq!(
            confounders.covariate_model,
            CovariateModel::GaussianIid { k: 10 }
        );
        assert_eq!(confounders.beta, vec![0.1; 10]);
    }

    #[test]
    fn bootstrap_se_appears_only_for_row() {
        let config = binary_config(150);
        let settings = RunSettings {
            bootstrap_reps: 20,
            ..RunSettings::default()
        };
        let rows = run_scenario(
            &config,
            &[EstimatorKind::Row { delta: 0.05 }, EstimatorKind::Naive],
            8,
            1,
            &settings,
        )
        .unwrap();
        assert!(rows[0].coverage_boot.is_finite());
        assert!(rows[0].se_ratio_boot.is_finite());
        assert!(rows[1].coverage_boot.is_nan());
    }
}
