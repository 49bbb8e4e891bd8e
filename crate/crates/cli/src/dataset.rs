//! CSV dataset ingestion and validation.
//!
//! A dataset file has a header row with required columns `time` (positive
//! decimal), `event` (0/1), and a treatment column (decimal or 0/1, named
//! `treatment` unless overridden); every remaining column is a covariate in
//! file order. No missing values are allowed.

use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::CliError;

#[derive(Debug, Clone)]
pub struct Dataset {
    pub time: Vec<f64>,
    pub event: Vec<bool>,
    pub treatment: DVector<f64>,
    pub covariates: DMatrix<f64>,
    pub covariate_names: Vec<String>,
}

impl Dataset {
    pub fn n(&self) -> usize {
        self.time.len()
    }

    pub fn treatment_is_binary(&self) -> bool {
        self.treatment.iter().all(|v| *v == 0.0 || *v == 1.0)
    }

    /// Column values by name, searching the treatment and covariates.
    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        if let Some(k) = self.covariate_names.iter().position(|c| c == name) {
            return Some(self.covariates.column(k).iter().copied().collect());
        }
        None
    }
}

fn parse_cell(raw: &str, column: &str, line: usize) -> Result<f64, CliError> {
    let trimmed = raw.trim();
    if trimmed.is_empty() {
        return Err(CliError::Validation(format!(
            "missing value in column '{column}' at data row {line}"
        )));
    }
    trimmed.parse::<f64>().map_err(|_| {
        CliError::Validation(format!(
            "column '{column}' holds non-numeric value '{trimmed}' at data row {line}"
        ))
    })
}

pub fn read_dataset(path: &Path, treatment_col: &str) -> Result<Dataset, CliError> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| CliError::Validation(format!("cannot read {}: {e}", path.display())))?;
    let headers: Vec<String> = reader
        .headers()
        .map_err(|e| CliError::Validation(format!("bad header in {}: {e}", path.display())))?
        .iter()
        .map(|h| h.to_string())
        .collect();

    let position = |name: &str| headers.iter().position(|h| h == name);
    let time_idx = position("time")
        .ok_or_else(|| CliError::Validation("required column 'time' is missing".into()))?;
    let event_idx = position("event")
        .ok_or_else(|| CliError::Validation("required column 'event' is missing".into()))?;
    let treat_idx = position(treatment_col).ok_or_else(|| {
        CliError::Validation(format!("treatment column '{treatment_col}' is missing"))
    })?;
    let covariate_cols: Vec<usize> = (0..headers.len())
        .filter(|&i| i != time_idx && i != event_idx && i != treat_idx)
        .collect();

    let mut time = Vec::new();
    let mut event = Vec::new();
    let mut treatment = Vec::new();
    let mut cov_rows: Vec<Vec<f64>> = Vec::new();
    for (row_no, record) in reader.records().enumerate() {
        let record = record
            .map_err(|e| CliError::Validation(format!("malformed CSV record: {e}")))?;
        if record.len() != headers.len() {
            return Err(CliError::Validation(format!(
                "row {} has {} fields, expected {}",
                row_no + 1,
                record.len(),
                headers.len()
            )));
        }
        let line = row_no + 1;
        let t = parse_cell(&record[time_idx], "time", line)?;
        if !t.is_finite() || t <= 0.0 {
            return Err(CliError::Validation(format!(
                "column 'time' must be positive and finite, found {t} at data row {line}"
            )));
        }
        let ev = parse_cell(&record[event_idx], "event", line)?;
        if ev != 0.0 && ev != 1.0 {
            return Err(CliError::Validation(format!(
                "column 'event' must be 0 or 1, found {ev} at data row {line}"
            )));
        }
        let a = parse_cell(&record[treat_idx], treatment_col, line)?;
        if !a.is_finite() {
            return Err(CliError::Validation(format!(
                "treatment value is not finite at data row {line}"
            )));
        }
        let mut row = Vec::with_capacity(covariate_cols.len());
        for &c in &covariate_cols {
            let v = parse_cell(&record[c], &headers[c], line)?;
            if !v.is_finite() {
                return Err(CliError::Validation(format!(
                    "column '{}' is not finite at data row {line}",
                    headers[c]
                )));
            }
            row.push(v);
        }
        time.push(t);
        event.push(ev == 1.0);
        treatment.push(a);
        cov_rows.push(row);
    }

    let n = time.len();
    if n < 2 {
        return Err(CliError::Validation(format!(
            "dataset needs at least 2 rows, found {n}"
        )));
    }
    let m = covariate_cols.len();
    let covariates = DMatrix::from_fn(n, m, |i, k| cov_rows[i][k]);
    Ok(Dataset {
        time,
        event,
        treatment: DVector::from_vec(treatment),
        covariates,
        covariate_names: covariate_cols
            .iter()
            .map(|&c| headers[c].clone())
            .collect(),
    })
}

/// Reads a weight vector: either the literal `uniform` or a CSV file with a
/// `row_weight` column (as written by the weights command).
pub fn read_weights(spec: &str, n: usize) -> Result<Vec<f64>, CliError> {
    if spec == "uniform" {
        return Ok(vec![1.0 / n as f64; n]);
    }
    let path = Path::new(spec);
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| CliError::Validation(format!("cannot read {}: {e}", path.display())))?;
    let headers = reader
        .headers()
        .map_err(|e| CliError::Validation(format!("bad weight header: {e}")))?;
    let col = headers
        .iter()
        .position(|h| h == "row_weight")
        .ok_or_else(|| CliError::Validation("weight file lacks a 'row_weight' column".into()))?;
    let mut weights = Vec::new();
    for (row_no, record) in reader.records().enumerate() {
        let record =
            record.map_err(|e| CliError::Validation(format!("malformed weight record: {e}")))?;
        let w = parse_cell(&record[col], "row_weight", row_no + 1)?;
        if !w.is_finite() || w < 0.0 {
            return Err(CliError::Validation(format!(
                "weights must be non-negative, found {w} at data row {}",
                row_no + 1
            )));
        }
        weights.push(w);
    }
    if weights.len() != n {
        return Err(CliError::Validation(format!(
            "weight file has {} rows but the dataset has {n}",
            weights.len()
        )));
    }
    if weights.iter().sum::<f64>() <= 0.0 {
        return Err(CliError::Validation("weights sum to zero".into()));
    }
    Ok(weights)
}

/// 17-significant-digit float formatting; round-trips f64 exactly.
pub fn fmt_float(v: f64) -> String {
    if v.is_nan() {
        "NaN".to_string()
    } else {
        format!("{v:.16e}")
    }
}
