//! Run metadata and the JSON-lines metrics log shared by all trainers.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use cdgan_core::metrics::ConfusionMatrix;
use cdgan_core::objectives::LossValues;

use crate::error::{io_ctx, CliError, Result};

/// One line of the metrics log. Every trained model kind emits the
/// same schema, so comparison tables are a pure evaluation concern.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "record", rename_all = "snake_case")]
pub enum LogRecord {
    Step {
        iteration: u64,
        model: String,
        lr: f64,
        #[serde(flatten)]
        losses: LossValues,
    },
    Eval {
        iteration: u64,
        model: String,
        accuracy: f64,
        confusion: ConfusionMatrix,
    },
}

/// Append-only JSON-lines writer for [`LogRecord`]s.
pub struct MetricsLog {
    path: PathBuf,
    file: std::io::BufWriter<fs::File>,
}

impl MetricsLog {
    /// Open for appending, creating the file if needed.
    pub fn open(path: &Path) -> Result<Self> {
        let file = fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| io_ctx(path, e))?;
        Ok(MetricsLog { path: path.to_path_buf(), file: std::io::BufWriter::new(file) })
    }

    pub fn append(&mut self, record: &LogRecord) -> Result<()> {
        serde_json::to_writer(&mut self.file, record)
            .map_err(|e| CliError::usage(format!("{}: {e}", self.path.display())))?;
        self.file.write_all(b"\n").map_err(|e| io_ctx(&self.path, e))
    }

    pub fn flush(&mut self) -> Result<()> {
        self.file.flush().map_err(|e| io_ctx(&self.path, e))
    }
}

/// Read back a metrics log.
pub fn read_metrics(path: &Path) -> Result<Vec<LogRecord>> {
    let text = fs::read_to_string(path).map_err(|e| io_ctx(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(line).map_err(|e| {
            CliError::usage(format!("{}:{}: bad metrics record: {e}", path.display(), i + 1))
        })?);
    }
    Ok(out)
}

/// Reproducibility metadata written alongside every command's outputs:
/// the resolved configuration snapshot and seed are sufficient to
/// regenerate them.
#[derive(Debug, Serialize, Deserialize)]
pub struct RunRecord {
    pub command: String,
    pub seed: u64,
    /// Fully resolved configuration (flags over config file over defaults).
    pub config: serde_json::Value,
    pub artifacts: Vec<String>,
    pub wall_clock_seconds: f64,
    pub artifact_version: String,
}

impl RunRecord {
    pub fn new(command: &str, seed: u64, config: serde_json::Value) -> Self {
        RunRecord {
            command: command.to_string(),
            seed,
            config,
            artifacts: Vec::new(),
            wall_clock_seconds: 0.0,
            artifact_version: env!("CARGO_PKG_VERSION").to_string(),
        }
    }

    pub fn artifact(&mut self, path: &Path) {
        self.artifacts.push(path.display().to_string());
    }

    /// Write as `run_record.json` in `out_dir`.
    pub fn write(&self, out_dir: &Path) -> Result<PathBuf> {
        let path = out_dir.join("run_record.json");
        let json = serde_json::to_vec_pretty(self)
            .map_err(|e| CliError::usage(format!("run record encode: {e}")))?;
        fs::write(&path, json).map_err(|e| io_ctx(&path, e))?;
        Ok(path)
    }
}
