//! Run manifests: a JSON sidecar recording every input, flag, and per-stage
//! wall time, written next to each command's primary output so a run can be
//! re-executed with identical parameters.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::Serialize;

use row_core::SolverSettings;

use crate::CliError;

#[derive(Debug, Serialize)]
pub struct Manifest {
    pub command: String,
    pub version: String,
    pub args: BTreeMap<String, String>,
    pub solver: Option<SolverManifest>,
    /// Wall-clock seconds per stage. Timing lives here, not in the data
    /// outputs, so those stay byte-identical across runs and thread counts.
    pub stages: BTreeMap<String, f64>,
}

#[derive(Debug, Serialize)]
pub struct SolverManifest {
    pub max_iterations: usize,
    pub eps_primal: f64,
    pub eps_dual: f64,
}

impl Manifest {
    pub fn new(command: &str) -> Self {
        Self {
            command: command.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            args: BTreeMap::new(),
            solver: None,
            stages: BTreeMap::new(),
        }
    }

    pub fn arg(&mut self, key: &str, value: impl ToString) {
        self.args.insert(key.to_string(), value.to_string());
    }

    pub fn solver_settings(&mut self, settings: &SolverSettings) {
        self.solver = Some(SolverManifest {
            max_iterations: settings.max_iterations,
            eps_primal: settings.eps_primal,
            eps_dual: settings.eps_dual,
        });
    }

    pub fn stage(&mut self, name: &str, elapsed: Duration) {
        self.stages.insert(name.to_string(), elapsed.as_secs_f64());
    }

    /// Writes `<output>.manifest.json` next to the primary output file.
    pub fn write_alongside(&self, output: &Path) -> Result<(), CliError> {
        let mut path = PathBuf::from(output);
        let file_name = match path.file_name() {
            Some(name) => format!("{}.manifest.json", name.to_string_lossy()),
            None => "manifest.json".to_string(),
        };
        path.set_file_name(file_name);
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        std::fs::write(&path, text)
            .map_err(|e| CliError::Validation(format!("cannot write {}: {e}", path.display())))
    }
}
