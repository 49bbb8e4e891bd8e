//! Command-line surface for robust orthogonality weights: CSV ingestion,
//! weight computation, weighted Cox fits, balance reports, simulation
//! sweeps, and Kaplan-Meier curve export with machine-readable outputs.
//!
//! Exit codes are a stable contract: 0 success, 2 infeasible balance
//! constraints, 3 solver non-convergence, 4 input validation, 5 Cox
//! non-convergence, 6 excessive simulation replicate failures.

mod dataset;
mod manifest;
mod simulate;

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use nalgebra::DVector;
use thiserror::Error;

use row_core::{
    balance::{abs_corr, asmd, BalanceReport},
    bootstrap_ci, compute_row, escalate_delta, fit_weighted_cox, sandwich_se, weighted_km,
    CoxError, RowError, RowResult, SolverSettings, SurvivalSample,
};

use dataset::{fmt_float, read_dataset, read_weights, Dataset};
use manifest::Manifest;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Infeasible(String),
    #[error("{0}")]
    SolverNonConvergence(String),
    #[error("{0}")]
    Validation(String),
    #[error("{0}")]
    CoxNonConvergence(String),
    #[error("{0}")]
    ReplicateFailures(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Infeasible(_) => 2,
            CliError::SolverNonConvergence(_) => 3,
            CliError::Validation(_) => 4,
            CliError::CoxNonConvergence(_) => 5,
            CliError::ReplicateFailures(_) => 6,
        }
    }
}

fn map_row_error(e: RowError) -> CliError {
    match e {
        RowError::Infeasible { delta } => CliError::Infeasible(format!(
            "no weights satisfy the balance bound delta = {delta}; increase the parameter delta"
        )),
        RowError::AllInfeasible { ref tried } => CliError::Infeasible(format!(
            "no weights satisfy the balance bound for any delta in {tried:?}; increase the parameter delta"
        )),
        RowError::MaxIterations => {
            CliError::SolverNonConvergence("the solver hit its iteration limit".into())
        }
        other => CliError::Validation(other.to_string()),
    }
}

fn map_cox_error(e: CoxError) -> CliError {
    match e {
        CoxError::NonIdentifiable
        | CoxError::MonotoneLikelihood
        | CoxError::NotConverged
        | CoxError::TooManyFailures { .. } => CliError::CoxNonConvergence(e.to_string()),
        CoxError::Weighting(row) => map_row_error(row),
        other => CliError::Validation(other.to_string()),
    }
}

#[derive(Parser)]
#[command(name = "row", version, about = "Robust orthogonality weights for marginal hazard ratios")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Compute balancing weights for a dataset.
    Weights(WeightsArgs),
    /// Fit a weighted Cox model for the treatment.
    Fit(FitArgs),
    /// Report covariate balance before and after weighting.
    Balance(BalanceArgs),
    /// Run a simulation sweep from a config file.
    Simulate(simulate::SimulateArgs),
    /// Export weighted Kaplan-Meier curves.
    Km(KmArgs),
}

#[derive(Args)]
struct WeightsArgs {
    /// Input dataset CSV (columns: time, event, treatment, covariates).
    #[arg(long)]
    input: PathBuf,
    /// Balance bound on each treatment-covariate correlation.
    #[arg(long)]
    delta: f64,
    /// Name of the treatment column.
    #[arg(long, default_value = "treatment")]
    treatment_col: String,
    /// Output CSV path for the weights.
    #[arg(long)]
    out: PathBuf,
    /// On infeasibility, retry with delta escalated through 10x and 100x.
    #[arg(long)]
    escalate: bool,
}

#[derive(Args)]
struct FitArgs {
    #[arg(long)]
    input: PathBuf,
    /// Weight source: a CSV with a row_weight column, or the word `uniform`.
    #[arg(long, default_value = "uniform")]
    weights: String,
    /// Which standard error drives the reported confidence interval.
    #[arg(long, value_enum, default_value_t = SeKind::Robust)]
    se: SeKind,
    /// Bootstrap replicates (only used with --se boot).
    #[arg(long, default_value_t = 200)]
    boot_reps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Balance bound used when the bootstrap recomputes the weights.
    #[arg(long, default_value_t = 0.001)]
    delta: f64,
    #[arg(long, default_value = "treatment")]
    treatment_col: String,
    /// Optional output path for the fit report (default: stdout).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum SeKind {
    Naive,
    Robust,
    Boot,
}

#[derive(Args)]
struct BalanceArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long, default_value = "uniform")]
    weights: String,
    #[arg(long, value_enum)]
    metric: MetricArg,
    #[arg(long, default_value = "treatment")]
    treatment_col: String,
    /// Optional output path for the per-covariate CSV (default: stdout).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum MetricArg {
    Asmd,
    Abscorr,
}

#[derive(Args)]
struct KmArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long, default_value = "uniform")]
    weights: String,
    /// Optional binary grouping column (e.g. the treatment).
    #[arg(long)]
    group_col: Option<String>,
    #[arg(long, default_value = "treatment")]
    treatment_col: String,
    #[arg(long)]
    out: PathBuf,
}

fn write_output(path: &PathBuf, contents: &str) -> Result<(), CliError> {
    std::fs::write(path, contents)
        .map_err(|e| CliError::Validation(format!("cannot write {}: {e}", path.display())))
}

fn balance_report(
    data: &Dataset,
    weights: &DVector<f64>,
    binary_metric: bool,
) -> Result<BalanceReport, CliError> {
    let result = if binary_metric {
        asmd(&data.covariates, &data.treatment, weights)
    } else {
        abs_corr(&data.covariates, &data.treatment, weights)
    };
    result.map_err(|e| CliError::Validation(e.to_string()))
}

fn summary_json(report: &BalanceReport) -> serde_json::Value {
    serde_json::json!({
        "per_covariate": report.per_covariate,
        "min": report.summary.0,
        "median": report.summary.1,
        "max": report.summary.2,
    })
}

fn cmd_weights(args: &WeightsArgs) -> Result<(), CliError> {
    let mut manifest = Manifest::new("weights");
    manifest.arg("input", args.input.display());
    manifest.arg("delta", args.delta);
    manifest.arg("treatment_col", &args.treatment_col);
    manifest.arg("out", args.out.display());
    manifest.arg("escalate", args.escalate);
    manifest.solver_settings(&SolverSettings::default());

    if !(args.delta > 0.0) {
        return Err(CliError::Validation(format!(
            "--delta must be positive, got {}",
            args.delta
        )));
    }
    let read_start = Instant::now();
    let data = read_dataset(&args.input, &args.treatment_col)?;
    manifest.stage("read_seconds", read_start.elapsed());
    if data.covariates.ncols() == 0 {
        return Err(CliError::Validation(
            "dataset has no covariate columns to balance".into(),
        ));
    }

    let solve_start = Instant::now();
    let settings = SolverSettings::default();
    let result: RowResult = if args.escalate {
        let grid = [args.delta, 10.0 * args.delta, 100.0 * args.delta];
        escalate_delta(&data.covariates, &data.treatment, &grid, &settings)
    } else {
        compute_row(&data.covariates, &data.treatment, args.delta, &settings)
    }
    .map_err(map_row_error)?;
    manifest.stage("solve_seconds", solve_start.elapsed());

    let mut csv_text = String::from("row_weight\n");
    for w in result.weights.iter() {
        csv_text.push_str(&fmt_float(*w));
        csv_text.push('\n');
    }
    write_output(&args.out, &csv_text)?;

    let binary_metric = data.treatment_is_binary();
    let uniform = DVector::from_element(data.n(), 1.0 / data.n() as f64);
    let before = balance_report(&data, &uniform, binary_metric)?;
    let after = balance_report(&data, &result.weights, binary_metric)?;
    let summary = serde_json::json!({
        "status": format!("{:?}", result.solver_status),
        "delta": result.delta,
        "iterations": result.iterations,
        "effective_sample_size": result.effective_sample_size,
        "duals": result.duals.as_slice(),
        "balance_metric": if binary_metric { "asmd" } else { "abscorr" },
        "balance_before": summary_json(&before),
        "balance_after": summary_json(&after),
    });
    println!("{}", serde_json::to_string_pretty(&summary).unwrap());

    manifest.write_alongside(&args.out)
}

fn cmd_fit(args: &FitArgs) -> Result<(), CliError> {
    let mut manifest = Manifest::new("fit");
    manifest.arg("input", args.input.display());
    manifest.arg("weights", &args.weights);
    manifest.arg("se", format!("{:?}", args.se).to_lowercase());
    manifest.arg("boot_reps", args.boot_reps);
    manifest.arg("seed", args.seed);
    manifest.arg("delta", args.delta);

    let data = read_dataset(&args.input, &args.treatment_col)?;
    let weights = read_weights(&args.weights, data.n())?;
    let sample = SurvivalSample::new(
        data.time.clone(),
        data.event.clone(),
        data.treatment.iter().copied().collect(),
        weights,
    )
    .map_err(map_cox_error)?;
    let fit_start = Instant::now();
    let fit = fit_weighted_cox(&sample).map_err(map_cox_error)?;
    let se_robust = sandwich_se(&sample, &fit).map_err(map_cox_error)?;
    manifest.stage("fit_seconds", fit_start.elapsed());

    let z = 1.959963984540054;
    let (se_label, se_value, boot) = match args.se {
        SeKind::Naive => ("naive", fit.se_naive, None),
        SeKind::Robust => ("robust", se_robust, None),
        SeKind::Boot => {
            if args.boot_reps < 2 {
                return Err(CliError::Validation(
                    "--boot-reps must be at least 2 for --se boot".into(),
                ));
            }
            let boot_start = Instant::now();
            let ci = bootstrap_ci(
                &data.time,
                &data.event,
                &data.treatment.iter().copied().collect::<Vec<f64>>(),
                &data.covariates,
                args.delta,
                args.boot_reps,
                args.seed,
                &SolverSettings::default(),
            )
            .map_err(map_cox_error)?;
            manifest.stage("bootstrap_seconds", boot_start.elapsed());
            ("boot", ci.se_boot, Some(ci))
        }
    };
    let ci_low = fit.theta - z * se_value;
    let ci_high = fit.theta + z * se_value;
    let report = serde_json::json!({
        "theta": fit.theta,
        "hazard_ratio": fit.hazard_ratio,
        "se_kind": se_label,
        "se": se_value,
        "se_naive": fit.se_naive,
        "se_robust": se_robust,
        "se_boot": boot.as_ref().map(|b| b.se_boot),
        "ci_theta": [ci_low, ci_high],
        "ci_hazard_ratio": [ci_low.exp(), ci_high.exp()],
        "iterations": fit.iterations,
        "converged": fit.converged,
    });
    let text = serde_json::to_string_pretty(&report).unwrap();
    match &args.out {
        Some(path) => {
            write_output(path, &text)?;
            manifest.write_alongside(path)?;
        }
        None => println!("{text}"),
    }
    Ok(())
}

fn cmd_balance(args: &BalanceArgs) -> Result<(), CliError> {
    let mut manifest = Manifest::new("balance");
    manifest.arg("input", args.input.display());
    manifest.arg("weights", &args.weights);
    manifest.arg("metric", format!("{:?}", args.metric).to_lowercase());

    let data = read_dataset(&args.input, &args.treatment_col)?;
    if data.covariates.ncols() == 0 {
        return Err(CliError::Validation("dataset has no covariate columns".into()));
    }
    let binary_metric = match args.metric {
        MetricArg::Asmd => {
            if !data.treatment_is_binary() {
                return Err(CliError::Validation(
                    "metric 'asmd' requires a binary 0/1 treatment; use 'abscorr'".into(),
                ));
            }
            true
        }
        MetricArg::Abscorr => false,
    };
    let weights = DVector::from_vec(read_weights(&args.weights, data.n())?);
    let uniform = DVector::from_element(data.n(), 1.0 / data.n() as f64);
    let before = balance_report(&data, &uniform, binary_metric)?;
    let after = balance_report(&data, &weights, binary_metric)?;

    let mut csv_text = String::from("covariate,pre,post\n");
    for (k, name) in data.covariate_names.iter().enumerate() {
        csv_text.push_str(&format!(
            "{name},{},{}\n",
            fmt_float(before.per_covariate[k]),
            fmt_float(after.per_covariate[k])
        ));
    }
    let summary = serde_json::json!({
        "metric": if binary_metric { "asmd" } else { "abscorr" },
        "pre": summary_json(&before),
        "post": summary_json(&after),
    });
    match &args.out {
        Some(path) => {
            write_output(path, &csv_text)?;
            manifest.write_alongside(path)?;
            println!("{}", serde_json::to_string_pretty(&summary).unwrap());
        }
        None => {
            print!("{csv_text}");
            println!("{}", serde_json::to_string_pretty(&summary).unwrap());
        }
    }
    Ok(())
}

fn cmd_km(args: &KmArgs) -> Result<(), CliError> {
    let mut manifest = Manifest::new("km");
    manifest.arg("input", args.input.display());
    manifest.arg("weights", &args.weights);
    if let Some(g) = &args.group_col {
        manifest.arg("group_col", g);
    }
    manifest.arg("out", args.out.display());

    let data = read_dataset(&args.input, &args.treatment_col)?;
    let weights = read_weights(&args.weights, data.n())?;
    let sample = SurvivalSample::new(
        data.time.clone(),
        data.event.clone(),
        data.treatment.iter().copied().collect(),
        weights,
    )
    .map_err(map_cox_error)?;

    let labels: Option<Vec<u8>> = match &args.group_col {
        None => None,
        Some(name) => {
            let values = if name == &args.treatment_col {
                data.treatment.iter().copied().collect()
            } else {
                data.column(name).ok_or_else(|| {
                    CliError::Validation(format!("group column '{name}' is missing"))
                })?
            };
            if values.iter().any(|v| *v != 0.0 && *v != 1.0) {
                return Err(CliError::Validation(format!(
                    "group column '{name}' must be binary 0/1"
                )));
            }
            Some(values.iter().map(|v| *v as u8).collect())
        }
    };
    let curves = weighted_km(&sample, labels.as_deref());

    let mut csv_text = String::from("group,time,survival\n");
    for curve in &curves {
        let group = curve
            .group
            .map(|g| g.to_string())
            .unwrap_or_else(|| "all".to_string());
        for point in &curve.points {
            csv_text.push_str(&format!(
                "{group},{},{}\n",
                fmt_float(point.time),
                fmt_float(point.survival)
            ));
        }
    }
    write_output(&args.out, &csv_text)?;
    manifest.write_alongside(&args.out)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Weights(args) => cmd_weights(args),
        Command::Fit(args) => cmd_fit(args),
        Command::Balance(args) => cmd_balance(args),
        Command::Simulate(args) => simulate::cmd_simulate(args),
        Command::Km(args) => cmd_km(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
