//! Simulated populations for the benchmark study: a six-covariate mix of
//! normal, log-normal, beta, categorical, and binary confounders (or an
//! i.i.d. Gaussian block), binary/continuous treatment models with a
//! positivity-violation dial, misspecified covariate views, Weibull event
//! times via inverse-probability sampling, and exponential censoring.

use nalgebra::{DMatrix, DVector};
use rand::prelude::*;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Beta, Exp, LogNormal, Normal};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum TreatmentKind {
    Binary { gamma: f64 },
    Continuous { eta: f64 },
}

impl TreatmentKind {
    pub fn is_binary(&self) -> bool {
        matches!(self, TreatmentKind::Binary { .. })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CovariateModel {
    /// The six-covariate mixed population.
    Mixed6,
    /// K i.i.d. standard normal confounders (used by the sample-size and
    /// confounder-count sweeps).
    GaussianIid { k: usize },
}

impl CovariateModel {
    pub fn num_covariates(&self) -> usize {
        match self {
            CovariateModel::Mixed6 => 6,
            CovariateModel::GaussianIid { k } => *k,
        }
    }
}

/// Every knob of the data-generating process.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub n: usize,
    /// Log marginal hazard ratio entering the event-time generator.
    pub theta: f64,
    /// Weibull scale parameter.
    pub psi: f64,
    /// Weibull shape parameter.
    pub shape_rho: f64,
    /// Outcome coefficients, one per covariate.
    pub beta: Vec<f64>,
    pub treatment_kind: TreatmentKind,
    /// Misspecification mix in [0, 1]; 0 leaves the analyst's covariate view
    /// identical to the generator's.
    pub tau: f64,
    /// Exponential censoring rate; 0 disables censoring.
    pub epsilon: f64,
    pub seed: u64,
    pub covariate_model: CovariateModel,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            n: 1000,
            theta: 0.2,
            psi: 0.01,
            shape_rho: 1.0,
            beta: vec![0.0, 1.0, 0.0, 1.4, 1.4, 1.0],
            treatment_kind: TreatmentKind::Binary { gamma: 1.0 },
            tau: 0.0,
            epsilon: 0.01,
            seed: 0,
            covariate_model: CovariateModel::Mixed6,
        }
    }
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.n < 2 {
            return Err("n must be at least 2".into());
        }
        if self.psi <= 0.0 || self.shape_rho <= 0.0 {
            return Err("Weibull parameters must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return Err("tau must lie in [0, 1]".into());
        }
        if self.epsilon < 0.0 {
            return Err("epsilon must be non-negative".into());
        }
        if self.beta.len() != self.covariate_model.num_covariates() {
            return Err(format!(
                "beta has {} entries but the covariate model produces {}",
                self.beta.len(),
                self.covariate_model.num_covariates()
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct GeneratedData {
    /// Generator inputs.
    pub x_true: DMatrix<f64>,
    /// The analyst's possibly misspecified view.
    pub x_observed: DMatrix<f64>,
    pub a: DVector<f64>,
    pub t_event: Vec<f64>,
    pub c: Vec<f64>,
    pub y: Vec<f64>,
    pub delta: Vec<bool>,
}

/// Deterministic per-purpose RNG stream derived from a scenario seed.
pub fn substream(seed: u64, stream: u64) -> ChaCha12Rng {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Six-covariate population: two shifted normals, a log-normal, a scaled
/// beta, a four-level categorical coded 1–4, and a Bernoulli indicator.
pub fn gen_covariates(n: usize, rng: &mut impl Rng) -> DMatrix<f64> {
    let normal = Normal::new(0.1, 1.0).unwrap();
    let lognormal = LogNormal::new(0.0, 0.5).unwrap();
    let beta = Beta::new(3.0, 1.0).unwrap();
    let cat_probs = [0.35, 0.25, 0.05, 0.35];

    let mut x = DMatrix::zeros(n, 6);
    for i in 0..n {
        x[(i, 0)] = rng.sample(normal);
    }
    for i in 0..n {
        x[(i, 1)] = rng.sample(normal);
    }
    for i in 0..n {
        x[(i, 2)] = rng.sample(lognormal);
    }
    for i in 0..n {
        x[(i, 3)] = 5.0 * rng.sample::<f64, _>(beta);
    }
    for i in 0..n {
        let u: f64 = rng.gen();
        let mut cum = 0.0;
        let mut code = cat_probs.len();
        for (j, p) in cat_probs.iter().enumerate() {
            cum += p;
            if u < cum {
                code = j + 1;
                break;
            }
        }
        x[(i, 4)] = code.min(cat_probs.len()) as f64;
    }
    for i in 0..n {
        x[(i, 5)] = if rng.gen::<f64>() < 0.25 { 1.0 } else { 0.0 };
    }
    x
}

pub fn gen_covariates_gaussian(n: usize, k: usize, rng: &mut impl Rng) -> DMatrix<f64> {
    let normal = Normal::new(0.0, 1.0).unwrap();
    let mut x = DMatrix::zeros(n, k);
    for col in 0..k {
        for i in 0..n {
            x[(i, col)] = rng.sample(normal);
        }
    }
    x
}

/// Centered covariate index Xᵀe − mean with e the unit-norm direction
/// (entries 1/sqrt(m)); the scaling reproduces the reported propensity
/// ranges of the positivity-violation grid.
fn centered_index(x: &DMatrix<f64>) -> Vec<f64> {
    let n = x.nrows();
    let scale = (x.ncols() as f64).sqrt();
    let sums: Vec<f64> = (0..n).map(|i| x.row(i).sum() / scale).collect();
    let mean = sums.iter().sum::<f64>() / n as f64;
    sums.into_iter().map(|s| s - mean).collect()
}

/// Binary treatment: Bernoulli with logistic propensity on the centered sum
/// of covariates, scaled by gamma. Larger gamma pushes propensities toward
/// 0/1 (practical positivity violation).
pub fn gen_treatment_binary(x: &DMatrix<f64>, gamma: f64, rng: &mut impl Rng) -> DVector<f64> {
    assert!(gamma > 0.0, "gamma must be positive");
    let index = centered_index(x);
    DVector::from_iterator(
        x.nrows(),
        index.iter().map(|&s| {
            let p = 1.0 / (1.0 + (-gamma * s).exp());
            if rng.gen::<f64>() < p {
                1.0
            } else {
                0.0
            }
        }),
    )
}

/// Propensities of the binary treatment model, without drawing assignments.
pub fn binary_propensities(x: &DMatrix<f64>, gamma: f64) -> Vec<f64> {
    centered_index(x)
        .into_iter()
        .map(|s| 1.0 / (1.0 + (-gamma * s).exp()))
        .collect()
}

/// Continuous treatment: centered covariate sum plus log-normal noise with
/// log-sd eta. eta = 0 degenerates the noise to the constant 1.
pub fn gen_treatment_continuous(x: &DMatrix<f64>, eta: f64, rng: &mut impl Rng) -> DVector<f64> {
    assert!(eta >= 0.0, "eta must be non-negative");
    let index = centered_index(x);
    let noise = if eta > 0.0 {
        Some(LogNormal::new(0.0, eta).unwrap())
    } else {
        None
    };
    DVector::from_iterator(
        x.nrows(),
        index.iter().map(|&s| {
            s + match noise {
                Some(d) => rng.sample(d),
                None => 1.0,
            }
        }),
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MisspecKind {
    BinaryScenario,
    ContinuousScenario,
}

/// Convex combination of the first four covariates with their nonlinear
/// transforms; columns 5–6 pass through untouched. tau = 0 is the identity.
pub fn apply_misspecification(x: &DMatrix<f64>, tau: f64, kind: MisspecKind) -> DMatrix<f64> {
    assert!((0.0..=1.0).contains(&tau), "tau must lie in [0, 1]");
    let mut out = x.clone();
    if tau == 0.0 || x.ncols() < 4 {
        return out;
    }
    for i in 0..x.nrows() {
        let (x1, x2, x3, x4) = (x[(i, 0)], x[(i, 1)], x[(i, 2)], x[(i, 3)]);
        let z = match kind {
            MisspecKind::BinaryScenario => [
                (x1 + 0.5).powi(2),
                ((x1 * x2) / 5.0 + 1.0).powi(2),
                (x3 / 2.0).exp(),
                x4 * (1.0 + x3.exp()) + 1.0,
            ],
            MisspecKind::ContinuousScenario => [
                (x1 / 2.0).exp(),
                x2 * (1.0 + x1.exp()) + 1.0,
                (x1 * x3 / 25.0 + 0.2).powi(3),
                2.0 * x4.abs().ln(),
            ],
        };
        for (k, zk) in z.iter().enumerate() {
            out[(i, k)] = x[(i, k)] * (1.0 - tau) + zk * tau;
        }
    }
    out
}

/// Weibull event times by inverse-probability sampling:
/// T = (−log u / (psi · exp(theta·A + Xᵀbeta)))^(1/shape).
pub fn gen_event_times(
    a: &DVector<f64>,
    x_true: &DMatrix<f64>,
    config: &ScenarioConfig,
    rng: &mut impl Rng,
) -> Vec<f64> {
    let n = a.len();
    let beta = DVector::from_column_slice(&config.beta);
    let lin = x_true * &beta;
    (0..n)
        .map(|i| {
            let u: f64 = rng.gen::<f64>().max(f64::MIN_POSITIVE);
            let rate = config.psi * (config.theta * a[i] + lin[i]).exp();
            (-u.ln() / rate).powf(1.0 / config.shape_rho)
        })
        .collect()
}

/// Exponential censoring times with rate epsilon; epsilon = 0 disables
/// censoring entirely.
pub fn gen_censoring(n: usize, epsilon: f64, rng: &mut impl Rng) -> Vec<f64> {
    assert!(epsilon >= 0.0);
    if epsilon == 0.0 {
        return vec![f64::INFINITY; n];
    }
    let exp = Exp::new(epsilon).unwrap();
    (0..n).map(|_| rng.sample(exp)).collect()
}

/// Full scenario draw: covariates, treatment, event and censoring times, the
/// observed pair (y, delta), and the analyst's misspecified covariate view.
/// Deterministic function of the config (including its seed).
pub fn generate(config: &ScenarioConfig) -> GeneratedData {
    config.validate().expect("invalid scenario config");
    let n = config.n;
    let mut cov_rng = substream(config.seed, 0);
    let mut trt_rng = substream(config.seed, 1);
    let mut evt_rng = substream(config.seed, 2);
    let mut cen_rng = substream(config.seed, 3);

    let x_true = match config.covariate_model {
        CovariateModel::Mixed6 => gen_covariates(n, &mut cov_rng),
        CovariateModel::GaussianIid { k } => gen_covariates_gaussian(n, k, &mut cov_rng),
    };
    let a = match config.treatment_kind {
        TreatmentKind::Binary { gamma } => gen_treatment_binary(&x_true, gamma, &mut trt_rng),
        TreatmentKind::Continuous { eta } => {
            gen_treatment_continuous(&x_true, eta, &mut trt_rng)
        }
    };
    let misspec_kind = if config.treatment_kind.is_binary() {
        MisspecKind::BinaryScenario
    } else {
        MisspecKind::ContinuousScenario
    };
    let x_observed = apply_misspecification(&x_true, config.tau, misspec_kind);
    let t_event = gen_event_times(&a, &x_true, config, &mut evt_rng);
    let c = gen_censoring(n, config.epsilon, &mut cen_rng);
    let y: Vec<f64> = t_event.iter().zip(&c).map(|(&t, &ci)| t.min(ci)).collect();
    let delta: Vec<bool> = t_event.iter().zip(&c).map(|(&t, &ci)| t < ci).collect();

    GeneratedData {
        x_true,
        x_observed,
        a,
        t_event,
        c,
        y,
        delta,
    }
}

/// The eight covariate–treatment relationship generators: linear, quadratic,
/// cubic, uncorrelated lattice, sinusoidal, independent, right-skewed, and
/// left-skewed. `kind` is 1-based.
pub fn relationship_gallery(kind: usize, n: usize, rng: &mut impl Rng) -> (Vec<f64>, Vec<f64>) {
    assert!((1..=8).contains(&kind), "gallery kinds are 1..=8");
    assert!(n >= 2);
    let std_normal = Normal::new(0.0, 1.0).unwrap();
    let mut x = Vec::with_capacity(n);
    let mut a = Vec::with_capacity(n);
    for _ in 0..n {
        let (xi, ai) = match kind {
            1 => {
                let xi: f64 = rng.sample(std_normal);
                (xi, xi + rng.sample::<f64, _>(std_normal))
            }
            2 => {
                let xi: f64 = rng.sample(std_normal);
                (xi, xi + xi * xi + rng.sample::<f64, _>(std_normal))
            }
            3 => {
                let xi: f64 = rng.sample(std_normal);
                (xi, 0.5 * (xi + 0.1).powi(3) + rng.sample::<f64, _>(std_normal))
            }
            4 => {
                let xi: f64 = rng.gen_range(-0.5..0.5);
                let sd = (1.0f64 / 3.0).sqrt();
                let ai = if xi.abs() <= 1.0 / 6.0 {
                    rng.sample(Normal::new(0.0, sd).unwrap())
                } else {
                    let center = if rng.gen::<bool>() { 1.0 } else { -1.0 };
                    rng.sample(Normal::new(center, sd).unwrap())
                };
                (xi, ai)
            }
            5 => {
                let xi: f64 = rng.sample(Normal::new(0.0, 2.0).unwrap());
                (xi, xi.sin() + rng.sample(Normal::new(0.0, 0.1f64.sqrt()).unwrap()))
            }
            6 => (rng.sample(std_normal), rng.sample(std_normal)),
            7 => {
                let xi: f64 = rng.sample(Beta::new(1.0, 5.0).unwrap());
                (xi, 4.0 * xi + rng.sample(LogNormal::new(0.0, 0.7).unwrap()))
            }
            8 => {
                let xi: f64 = rng.sample(Beta::new(5.0, 1.0).unwrap());
                (xi, 4.0 * xi + rng.sample::<f64, _>(Beta::new(5.0, 1.0).unwrap()))
            }
            _ => unreachable!(),
        };
        x.push(xi);
        a.push(ai);
    }
    (x, a)
}
