//! The simulate subcommand: parses a TOML scenario config plus axis grid,
//! runs the simulation sweep, and writes a deterministic metrics CSV.
//! Wall-clock timing goes to the manifest sidecar so the CSV is
//! byte-identical across runs and thread counts.

use std::path::PathBuf;
use std::time::Instant;

use clap::Args;
use serde::Deserialize;

use row_core::harness::{run_scenario, sweep, EstimatorKind, HarnessError, MetricRow, RunSettings, SweepAxis};
use row_core::simgen::{CovariateModel, ScenarioConfig, TreatmentKind};
use row_core::{CoxError, RowError};

use crate::dataset::fmt_float;
use crate::manifest::Manifest;
use crate::CliError;

#[derive(Args)]
pub struct SimulateArgs {
    /// TOML scenario configuration.
    #[arg(long)]
    config: PathBuf,
    /// Sweep axis: positivity, misspecification, censoring, sample-size,
    /// num-confounders, or none (single scenario).
    #[arg(long, default_value = "none")]
    axis: String,
    #[arg(long)]
    replicates: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output CSV path for the metrics table.
    #[arg(long)]
    out: PathBuf,
    /// Worker threads for replicate-level parallelism (0 = all cores).
    #[arg(long, default_value_t = 0)]
    threads: usize,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigFile {
    #[serde(default = "default_n")]
    n: usize,
    #[serde(default = "default_theta")]
    theta: f64,
    #[serde(default = "default_psi")]
    psi: f64,
    #[serde(default = "default_shape")]
    shape: f64,
    beta: Option<Vec<f64>>,
    #[serde(default = "default_treatment")]
    treatment: String,
    #[serde(default = "default_gamma")]
    gamma: f64,
    #[serde(default = "default_eta")]
    eta: f64,
    #[serde(default)]
    tau: f64,
    #[serde(default = "default_epsilon")]
    epsilon: f64,
    #[serde(default = "default_covariates")]
    covariates: String,
    #[serde(default = "default_k")]
    k: usize,
    estimators: Vec<String>,
    #[serde(default)]
    bootstrap_reps: usize,
    axis: Option<AxisTable>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct AxisTable {
    grid: Vec<f64>,
}

fn default_n() -> usize {
    1000
}
fn default_theta() -> f64 {
    0.2
}
fn default_psi() -> f64 {
    0.01
}
fn default_shape() -> f64 {
    1.0
}
fn default_treatment() -> String {
    "binary".into()
}
fn default_gamma() -> f64 {
    1.0
}
fn default_eta() -> f64 {
    0.6
}
fn default_epsilon() -> f64 {
    0.01
}
fn default_covariates() -> String {
    "mixed6".into()
}
fn default_k() -> usize {
    6
}

fn parse_estimator(spec: &str, binary: bool) -> Result<EstimatorKind, CliError> {
    if let Some(delta) = spec.strip_prefix("row:") {
        let delta: f64 = delta
            .parse()
            .map_err(|_| CliError::Validation(format!("bad row delta in estimator '{spec}'")))?;
        if !(delta > 0.0) {
            return Err(CliError::Validation(format!(
                "row delta must be positive in estimator '{spec}'"
            )));
        }
        return Ok(EstimatorKind::Row { delta });
    }
    match spec {
        "naive" => Ok(EstimatorKind::Naive),
        "om" => Ok(EstimatorKind::OutcomeModel),
        "ipw" if binary => Ok(EstimatorKind::IpwBinaryLogistic { stabilized: false }),
        "ipw-stabilized" if binary => Ok(EstimatorKind::IpwBinaryLogistic { stabilized: true }),
        "ipw" => Ok(EstimatorKind::IpwContinuousNormal { stabilized: false }),
        "ipw-stabilized" => Ok(EstimatorKind::IpwContinuousNormal { stabilized: true }),
        other => Err(CliError::Validation(format!(
            "unknown estimator '{other}' (expected row:DELTA, naive, om, ipw, ipw-stabilized)"
        ))),
    }
}

fn parse_axis(name: &str) -> Result<Option<SweepAxis>, CliError> {
    match name {
        "none" => Ok(None),
        "positivity" => Ok(Some(SweepAxis::Positivity)),
        "misspecification" => Ok(Some(SweepAxis::Misspecification)),
        "censoring" => Ok(Some(SweepAxis::Censoring)),
        "sample-size" => Ok(Some(SweepAxis::SampleSize)),
        "num-confounders" => Ok(Some(SweepAxis::NumConfounders)),
        other => Err(CliError::Validation(format!(
            "unknown axis '{other}' (expected positivity, misspecification, censoring, sample-size, num-confounders, none)"
        ))),
    }
}

fn map_harness_error(e: HarnessError) -> CliError {
    match e {
        HarnessError::TooManyFailures { failed, total } => CliError::ReplicateFailures(format!(
            "an estimator failed on {failed} of {total} replicates"
        )),
        HarnessError::Row(RowError::Infeasible { .. })
        | HarnessError::Row(RowError::AllInfeasible { .. }) => {
            CliError::Infeasible(e.to_string())
        }
        HarnessError::Row(RowError::MaxIterations) => CliError::SolverNonConvergence(e.to_string()),
        HarnessError::Cox(CoxError::NotConverged)
        | HarnessError::Cox(CoxError::MonotoneLikelihood)
        | HarnessError::Cox(CoxError::NonIdentifiable) => {
            CliError::CoxNonConvergence(e.to_string())
        }
        other => CliError::Validation(other.to_string()),
    }
}

fn rows_to_csv(rows: &[MetricRow]) -> String {
    let mut text = String::from(
        "scenario,estimator,replicates,failures,abs_bias_theta,abs_bias_hr,rmse,\
         coverage_naive,coverage_robust,coverage_boot,\
         se_ratio_naive,se_ratio_robust,se_ratio_boot,balance_summary\n",
    );
    for row in rows {
        text.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
            row.scenario,
            row.estimator,
            row.replicates,
            row.failures,
            fmt_float(row.abs_bias_theta),
            fmt_float(row.abs_bias_hr),
            fmt_float(row.rmse),
            fmt_float(row.coverage_naive),
            fmt_float(row.coverage_robust),
            fmt_float(row.coverage_boot),
            fmt_float(row.se_ratio_naive),
            fmt_float(row.se_ratio_robust),
            fmt_float(row.se_ratio_boot),
            fmt_float(row.balance_summary),
        ));
    }
    text
}

pub fn cmd_simulate(args: &SimulateArgs) -> Result<(), CliError> {
    let mut manifest = Manifest::new("simulate");
    manifest.arg("config", args.config.display());
    manifest.arg("axis", &args.axis);
    manifest.arg("replicates", args.replicates);
    manifest.arg("seed", args.seed);
    manifest.arg("out", args.out.display());
    manifest.arg("threads", args.threads);

    if args.replicates == 0 {
        return Err(CliError::Validation("--replicates must be at least 1".into()));
    }
    let text = std::fs::read_to_string(&args.config).map_err(|e| {
        CliError::Validation(format!("cannot read {}: {e}", args.config.display()))
    })?;
    let file: ConfigFile = toml::from_str(&text)
        .map_err(|e| CliError::Validation(format!("bad config: {e}")))?;

    let treatment_kind = match file.treatment.as_str() {
        "binary" => TreatmentKind::Binary { gamma: file.gamma },
        "continuous" => TreatmentKind::Continuous { eta: file.eta },
        other => {
            return Err(CliError::Validation(format!(
                "treatment must be 'binary' or 'continuous', got '{other}'"
            )))
        }
    };
    let covariate_model = match file.covariates.as_str() {
        "mixed6" => CovariateModel::Mixed6,
        "gaussian" => CovariateModel::GaussianIid { k: file.k },
        other => {
            return Err(CliError::Validation(format!(
                "covariates must be 'mixed6' or 'gaussian', got '{other}'"
            )))
        }
    };
    let beta = file.beta.unwrap_or_else(|| match covariate_model {
        CovariateModel::Mixed6 => vec![0.0, 1.0, 0.0, 1.4, 1.4, 1.0],
        CovariateModel::GaussianIid { k } => vec![1.4; k],
    });
    let config = ScenarioConfig {
        n: file.n,
        theta: file.theta,
        psi: file.psi,
        shape_rho: file.shape,
        beta,
        treatment_kind,
        tau: file.tau,
        epsilon: file.epsilon,
        seed: 0,
        covariate_model,
    };
    config.validate().map_err(CliError::Validation)?;

    let binary = treatment_kind.is_binary();
    let estimators: Vec<EstimatorKind> = file
        .estimators
        .iter()
        .map(|s| parse_estimator(s, binary))
        .collect::<Result<_, _>>()?;
    if estimators.is_empty() {
        return Err(CliError::Validation("config lists no estimators".into()));
    }
    let axis = parse_axis(&args.axis)?;
    let settings = RunSettings {
        bootstrap_reps: file.bootstrap_reps,
        ..RunSettings::default()
    };

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(args.threads)
        .build()
        .map_err(|e| CliError::Validation(format!("cannot build thread pool: {e}")))?;
    let sweep_start = Instant::now();
    let rows = pool
        .install(|| match axis {
            None => run_scenario(&config, &estimators, args.replicates, args.seed, &settings),
            Some(axis) => {
                let grid = file
                    .axis
                    .as_ref()
                    .map(|a| a.grid.clone())
                    .ok_or(HarnessError::EmptyGrid)?;
                sweep(
                    axis,
                    &grid,
                    &config,
                    &estimators,
                    args.replicates,
                    args.seed,
                    &settings,
                )
            }
        })
        .map_err(map_harness_error)?;
    manifest.stage("sweep_seconds", sweep_start.elapsed());
    for row in &rows {
        manifest.arg(
            &format!("mean_time_seconds[{}|{}]", row.scenario, row.estimator),
            row.mean_time_seconds,
        );
    }

    std::fs::write(&args.out, rows_to_csv(&rows))
        .map_err(|e| CliError::Validation(format!("cannot write {}: {e}", args.out.display())))?;
    manifest.write_alongside(&args.out)
}
