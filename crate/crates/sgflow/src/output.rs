//! Output directory, manifests and CSV tables.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::{json, Value};

use crate::config::ExperimentConfig;
use crate::error::{CliError, Result};

pub struct OutDir {
    pub path: PathBuf,
}

impl OutDir {
    pub fn create(path: &Path) -> Result<Self> {
        fs::create_dir_all(path).map_err(CliError::io(format!("creating {}", path.display())))?;
        Ok(OutDir {
            path: path.to_path_buf(),
        })
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }

    pub fn write_json<T: Serialize>(&self, name: &str, value: &T) -> Result<()> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        let path = self.file(name);
        fs::write(&path, text).map_err(CliError::io(format!("writing {}", path.display())))
    }

    pub fn write_table(&self, name: &str, header: &[String], rows: &[Vec<String>]) -> Result<()> {
        let mut w = csv::Writer::from_path(self.file(name))?;
        w.write_record(header)?;
        for row in rows {
            w.write_record(row)?;
        }
        w.flush().map_err(CliError::io(format!("writing {name}")))?;
        Ok(())
    }
}

/// Run facts common to every command.
#[derive(Clone, Debug, Serialize)]
pub struct RunFacts {
    pub seed: u64,
    pub s: f64,
    pub r0: f64,
    pub r_t: f64,
    pub dt: f64,
    pub steps: usize,
}

/// The manifest: config echo, versions, run facts, tolerances and results.
/// Keys are sorted and no clock or host data is recorded.
pub fn manifest(
    command: &str,
    cfg: &ExperimentConfig,
    facts: Option<&RunFacts>,
    status: &str,
    error: Option<String>,
    results: Value,
) -> Result<Value> {
    Ok(json!({
        "command": command,
        "versions": {
            "sgflow": env!("CARGO_PKG_VERSION"),
            "sgflow_core": sgflow_core::VERSION,
            "manifest": 1,
        },
        "config": serde_json::to_value(cfg)?,
        "facts": facts,
        "tolerances": {
            "ot_mass": cfg.ot.tol,
            "ot_max_iter": cfg.ot.max_iter,
            "measure_preservation": cfg.diagnostics.measure_tolerance,
            "residual_constant": cfg.diagnostics.residual_constant,
            "bins": cfg.diagnostics.bins,
        },
        "status": status,
        "error": error,
        "results": results,
    }))
}

pub fn num(v: f64) -> String {
    v.to_string()
}
