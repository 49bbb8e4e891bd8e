//! Weighted Cox proportional-hazards estimation of the marginal hazard
//! ratio, with naive, robust-sandwich, and bootstrap standard errors, and a
//! weighted Kaplan–Meier product-limit estimator.

use nalgebra::{DMatrix, DVector};
use rand::prelude::*;
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::qp::SolverSettings;
use crate::row::{compute_row, RowError};

#[derive(Debug, Error)]
pub enum CoxError {
    #[error("input vectors must share one length and hold at least two units")]
    BadDimensions,
    #[error("observed times must be strictly positive and finite")]
    NonPositiveTime,
    #[error("weights must be non-negative, finite, and sum to a positive value")]
    BadWeights,
    #[error("sample has no events")]
    NoEvents,
    #[error("treatment is constant among positive-weight units; likelihood is flat")]
    NonIdentifiable,
    #[error("monotone partial likelihood; no finite maximizer")]
    MonotoneLikelihood,
    #[error("Newton iteration did not converge")]
    NotConverged,
    #[error("bootstrap failed on {failed} of {total} replicates")]
    TooManyFailures { failed: usize, total: usize },
    #[error("weighting failed inside bootstrap: {0}")]
    Weighting(#[from] RowError),
}

/// Per-unit survival data with nonnegative unit-sum weights.
#[derive(Debug, Clone)]
pub struct SurvivalSample {
    pub time: Vec<f64>,
    pub event: Vec<bool>,
    pub treatment: Vec<f64>,
    pub weight: Vec<f64>,
}

impl SurvivalSample {
    pub fn new(
        time: Vec<f64>,
        event: Vec<bool>,
        treatment: Vec<f64>,
        weight: Vec<f64>,
    ) -> Result<Self, CoxError> {
        let n = time.len();
        if n < 2 || event.len() != n || treatment.len() != n || weight.len() != n {
            return Err(CoxError::BadDimensions);
        }
        if time.iter().any(|t| !t.is_finite() || *t <= 0.0) {
            return Err(CoxError::NonPositiveTime);
        }
        if weight.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(CoxError::BadWeights);
        }
        let sum: f64 = weight.iter().sum();
        if sum <= 0.0 {
            return Err(CoxError::BadWeights);
        }
        if !event.iter().any(|e| *e) {
            return Err(CoxError::NoEvents);
        }
        Ok(Self {
            time,
            event,
            treatment,
            weight,
        })
    }

    pub fn len(&self) -> usize {
        self.time.len()
    }

    pub fn is_empty(&self) -> bool {
        self.time.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct CoxFit {
    pub theta: f64,
    pub hazard_ratio: f64,
    pub se_naive: f64,
    pub se_robust: f64,
    pub loglik: f64,
    pub iterations: usize,
    pub converged: bool,
}

#[derive(Debug, Clone)]
pub struct BootstrapCi {
    pub theta: f64,
    pub se_boot: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub hr_ci_low: f64,
    pub hr_ci_high: f64,
    pub replicates_used: usize,
    pub replicates_failed: usize,
}

/// Tie groups of units sorted by observed time, ascending.
struct SortedSample {
    /// Unit indices grouped by identical time, groups ascending in time.
    groups: Vec<Vec<usize>>,
    /// Weights rescaled to mean 1 so the naive information matches standard
    /// case-weight software; the maximizer is invariant to the rescaling.
    w: Vec<f64>,
    /// Treatment centered at its weighted mean; the partial likelihood is
    /// shift-invariant and centering avoids overflow in exp(theta * a).
    a: Vec<f64>,
}

impl SortedSample {
    fn build(sample: &SurvivalSample) -> Self {
        let n = sample.len();
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&i, &j| {
            sample.time[i]
                .partial_cmp(&sample.time[j])
                .expect("times are finite")
                .then(i.cmp(&j))
        });
        let mut groups: Vec<Vec<usize>> = Vec::new();
        for idx in order {
            match groups.last_mut() {
                Some(g) if sample.time[g[0]] == sample.time[idx] => g.push(idx),
                _ => groups.push(vec![idx]),
            }
        }
        let wsum: f64 = sample.weight.iter().sum();
        let scale = n as f64 / wsum;
        let w: Vec<f64> = sample.weight.iter().map(|wi| wi * scale).collect();
        let wbar =
            sample.treatment.iter().zip(&w).map(|(a, wi)| a * wi).sum::<f64>() / n as f64;
        let a: Vec<f64> = sample.treatment.iter().map(|ai| ai - wbar).collect();
        Self { groups, w, a }
    }
}

/// Weighted partial log-likelihood with its first two derivatives at theta
/// (Breslow tie handling).
pub fn partial_loglik(sample: &SurvivalSample, theta: f64) -> (f64, f64, f64) {
    let sorted = SortedSample::build(sample);
    loglik_at(sample, &sorted, theta)
}

fn loglik_at(sample: &SurvivalSample, sorted: &SortedSample, theta: f64) -> (f64, f64, f64) {
    let mut s0 = 0.0;
    let mut s1 = 0.0;
    let mut s2 = 0.0;
    let mut ll = 0.0;
    let mut score = 0.0;
    let mut info = 0.0;
    for group in sorted.groups.iter().rev() {
        for &i in group {
            let r = sorted.w[i] * (theta * sorted.a[i]).exp();
            s0 += r;
            s1 += r * sorted.a[i];
            s2 += r * sorted.a[i] * sorted.a[i];
        }
        for &i in group {
            // Zero-weight events contribute nothing; skipping them avoids
            // 0 * ln(0) when the whole risk set so far has zero weight.
            if sample.event[i] && sorted.w[i] > 0.0 && s0 > 0.0 {
                let wi = sorted.w[i];
                let abar = s1 / s0;
                ll += wi * (theta * sorted.a[i] - s0.ln());
                score += wi * (sorted.a[i] - abar);
                info += wi * (s2 / s0 - abar * abar);
            }
        }
    }
    (ll, score, info)
}

const SCORE_TOL: f64 = 1e-9;
const MAX_NEWTON_ITER: usize = 50;
const THETA_CAP: f64 = 50.0;

/// Fits the one-parameter weighted Cox model by safeguarded Newton iteration
/// from theta = 0, and attaches naive and robust standard errors.
pub fn fit_weighted_cox(sample: &SurvivalSample) -> Result<CoxFit, CoxError> {
    let sorted = SortedSample::build(sample);

    let (amean, avar) = {
        let mut sw = 0.0;
        let mut m = 0.0;
        for i in 0..sample.len() {
            sw += sorted.w[i];
            m += sorted.w[i] * sorted.a[i];
        }
        let mean = m / sw;
        let var = (0..sample.len())
            .map(|i| sorted.w[i] * (sorted.a[i] - mean).powi(2))
            .sum::<f64>()
            / sw;
        (mean, var)
    };
    let _ = amean;
    if avar <= 1e-24 {
        return Err(CoxError::NonIdentifiable);
    }

    let mut theta = 0.0;
    let (mut ll, mut score, mut info) = loglik_at(sample, &sorted, theta);
    let mut iterations = 0;
    let mut converged = false;

    // Newton-step criterion |score|/info ≤ tol: scale-free in theta and
    // immune to the O(n) floating-point noise floor of the raw score. A
    // monotone likelihood keeps the ratio bounded away from zero, so it
    // can never satisfy this and instead runs into the theta cap.
    let score_small =
        |score: f64, info: f64| info.is_finite() && info > 0.0 && score.abs() <= SCORE_TOL * info;

    for iter in 1..=MAX_NEWTON_ITER {
        iterations = iter;
        if score_small(score, info) {
            converged = true;
            break;
        }
        if info <= 0.0 || !info.is_finite() {
            return Err(CoxError::MonotoneLikelihood);
        }
        let mut step = score / info;
        // Step-halving when the likelihood would decrease.
        let mut accepted = false;
        for _ in 0..30 {
            let cand = theta + step;
            let (ll_c, score_c, info_c) = loglik_at(sample, &sorted, cand);
            // Tolerate the rounding noise of the recomputed log likelihood.
            if ll_c.is_finite() && ll_c >= ll - 1e-10 * (1.0 + ll.abs()) {
                theta = cand;
                ll = ll_c;
                score = score_c;
                info = info_c;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            break;
        }
        if theta.abs() > THETA_CAP {
            return Err(CoxError::MonotoneLikelihood);
        }
    }
    if !converged && score_small(score, info) {
        converged = true;
    }
    if !converged {
        return Err(CoxError::NotConverged);
    }

    let se_naive = (1.0 / info).sqrt();
    let mut fit = CoxFit {
        theta,
        hazard_ratio: theta.exp(),
        se_naive,
        se_robust: f64::NAN,
        loglik: ll,
        iterations,
        converged,
    };
    fit.se_robust = sandwich_se(sample, &fit)?;
    Ok(fit)
}

/// Robust sandwich standard error (I⁻¹ B I⁻¹)^{1/2} built from weighted
/// Lin–Wei score residuals, treating the weights as fixed.
pub fn sandwich_se(sample: &SurvivalSample, fit: &CoxFit) -> Result<f64, CoxError> {
    if !fit.converged {
        return Err(CoxError::NotConverged);
    }
    let sorted = SortedSample::build(sample);
    let theta = fit.theta;
    let (_, _, info) = loglik_at(sample, &sorted, theta);

    let n = sample.len();
    // Risk-set sums at each unit's own time (group-entry order, descending).
    let mut abar_at = vec![0.0f64; n];
    let mut s0_at = vec![0.0f64; n];
    let mut s0 = 0.0;
    let mut s1 = 0.0;
    for group in sorted.groups.iter().rev() {
        for &i in group {
            let r = sorted.w[i] * (theta * sorted.a[i]).exp();
            s0 += r;
            s1 += r * sorted.a[i];
        }
        for &i in group {
            abar_at[i] = s1 / s0;
            s0_at[i] = s0;
        }
    }

    // Prefix sums over event times t <= Y_i of w_j/S0(t) and w_j*abar(t)/S0(t).
    let mut b = 0.0f64;
    let mut cum_g = 0.0;
    let mut cum_h = 0.0;
    for group in &sorted.groups {
        for &i in group {
            // Zero-weight events (and the degenerate all-zero-weight risk
            // sets they can create) contribute nothing to the score.
            if sample.event[i] && sorted.w[i] > 0.0 && s0_at[i] > 0.0 {
                cum_g += sorted.w[i] / s0_at[i];
                cum_h += sorted.w[i] * abar_at[i] / s0_at[i];
            }
        }
        for &i in group {
            let wi = sorted.w[i];
            let mut u = 0.0;
            if sample.event[i] && wi > 0.0 && s0_at[i] > 0.0 {
                u += wi * (sorted.a[i] - abar_at[i]);
            }
            u -= wi * (theta * sorted.a[i]).exp() * (sorted.a[i] * cum_g - cum_h);
            b += u * u;
        }
    }

    Ok(b.sqrt() / info)
}

/// Nonparametric bootstrap of the full pipeline: resample rows, recompute the
/// balancing weights on each resample, refit the weighted Cox model. The
/// normal-approximation interval is centered at the full-sample estimate.
#[allow(clippy::too_many_arguments)]
pub fn bootstrap_ci(
    time: &[f64],
    event: &[bool],
    treatment: &[f64],
    covariates: &DMatrix<f64>,
    delta: f64,
    replicates: usize,
    seed: u64,
    settings: &SolverSettings,
) -> Result<BootstrapCi, CoxError> {
    assert!(replicates >= 2, "bootstrap needs at least two replicates");
    let n = time.len();
    if event.len() != n || treatment.len() != n || covariates.nrows() != n {
        return Err(CoxError::BadDimensions);
    }

    let point = {
        let a = DVector::from_column_slice(treatment);
        let row = compute_row(covariates, &a, delta, settings)?;
        let sample = SurvivalSample::new(
            time.to_vec(),
            event.to_vec(),
            treatment.to_vec(),
            row.weights.iter().copied().collect(),
        )?;
        fit_weighted_cox(&sample)?
    };

    let estimates: Vec<Option<f64>> = (0..replicates)
        .into_par_iter()
        .map(|r| {
            let mut rng = ChaCha12Rng::seed_from_u64(seed);
            rng.set_stream(r as u64 + 1);
            let idx: Vec<usize> = (0..n).map(|_| rng.gen_range(0..n)).collect();
            replicate_estimate(time, event, treatment, covariates, delta, settings, &idx)
        })
        .collect();

    let thetas: Vec<f64> = estimates.iter().filter_map(|e| *e).collect();
    let used = thetas.len();
    let failed = replicates - used;
    if failed > replicates / 2 {
        return Err(CoxError::TooManyFailures {
            failed,
            total: replicates,
        });
    }

    let mean = thetas.iter().sum::<f64>() / used as f64;
    let se_boot = if used >= 2 {
        (thetas.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / (used as f64 - 1.0)).sqrt()
    } else {
        0.0
    };
    let ci_low = point.theta - 1.96 * se_boot;
    let ci_high = point.theta + 1.96 * se_boot;
    Ok(BootstrapCi {
        theta: point.theta,
        se_boot,
        ci_low,
        ci_high,
        hr_ci_low: ci_low.exp(),
        hr_ci_high: ci_high.exp(),
        replicates_used: used,
        replicates_failed: failed,
    })
}

fn replicate_estimate(
    time: &[f64],
    event: &[bool],
    treatment: &[f64],
    covariates: &DMatrix<f64>,
    delta: f64,
    settings: &SolverSettings,
    idx: &[usize],
) -> Option<f64> {
    let n = idx.len();
    let m = covariates.ncols();
    let x = DMatrix::from_fn(n, m, |i, k| covariates[(idx[i], k)]);
    let a = DVector::from_fn(n, |i, _| treatment[idx[i]]);
    let row = compute_row(&x, &a, delta, settings).ok()?;
    let sample = SurvivalSample::new(
        idx.iter().map(|&i| time[i]).collect(),
        idx.iter().map(|&i| event[i]).collect(),
        idx.iter().map(|&i| treatment[i]).collect(),
        row.weights.iter().copied().collect(),
    )
    .ok()?;
    fit_weighted_cox(&sample).ok().map(|fit| fit.theta)
}

/// One step of a survival curve: the curve drops to `survival` just after
/// `time`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KmPoint {
    pub time: f64,
    pub survival: f64,
}

/// A weighted product-limit curve for one group of units.
#[derive(Debug, Clone)]
pub struct KmCurve {
    pub group: Option<u8>,
    pub points: Vec<KmPoint>,
}

/// Weighted Kaplan–Meier estimator. With a binary `group` label one curve per
/// group is returned; weights need not be renormalized within groups because
/// the product-limit ratio is scale-free.
pub fn weighted_km(sample: &SurvivalSample, group: Option<&[u8]>) -> Vec<KmCurve> {
    match group {
        None => vec![km_single(sample, None, |_| true)],
        Some(labels) => {
            assert_eq!(labels.len(), sample.len(), "group labels must match sample");
            [0u8, 1u8]
                .iter()
                .map(|&g| km_single(sample, Some(g), |i| labels[i] == g))
                .collect()
        }
    }
}

fn km_single(
    sample: &SurvivalSample,
    label: Option<u8>,
    keep: impl Fn(usize) -> bool,
) -> KmCurve {
    let mut idx: Vec<usize> = (0..sample.len()).filter(|&i| keep(i)).collect();
    idx.sort_by(|&i, &j| {
        sample.time[i]
            .partial_cmp(&sample.time[j])
            .expect("times are finite")
            .then(i.cmp(&j))
    });

    let mut points = vec![KmPoint {
        time: 0.0,
        survival: 1.0,
    }];
    let mut at_risk: f64 = idx.iter().map(|&i| sample.weight[i]).sum();
    let mut s = 1.0;
    let mut pos = 0;
    while pos < idx.len() {
        let t = sample.time[idx[pos]];
        let mut d_w = 0.0;
        let mut removed = 0.0;
        let mut end = pos;
        while end < idx.len() && sample.time[idx[end]] == t {
            let i = idx[end];
            removed += sample.weight[i];
            if sample.event[i] {
                d_w += sample.weight[i];
            }
            end += 1;
        }
        if d_w > 0.0 && at_risk > 0.0 {
            s *= 1.0 - d_w / at_risk;
            points.push(KmPoint { time: t, survival: s });
        }
        at_risk -= removed;
        pos = end;
    }
    KmCurve {
        group: label,
        points,
    }
}
