//! Machine-readable run reports: a JSON document per run plus CSV
//! tables for per-item results.
//!
//! Serialization is deterministic — struct fields keep declaration
//! order, map aggregates are sorted, and floats use shortest-roundtrip
//! formatting — so identical `(config, seed)` runs produce byte-identical
//! files.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use maskdiff::estimators::EstimateResult;
use maskdiff::identities::IdentityCheck;
use maskdiff::{Error, Result};

/// Version of the report layout, embedded in every document.
pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// One Monte Carlo (or exact) estimate of a scalar quantity in nats.
#[derive(Debug, Clone, serde::Serialize)]
pub struct EstimateRecord {
    /// Which estimator produced the value.
    pub estimator: String,
    /// What was estimated (sequence id or pair id).
    pub target: String,
    pub n_samples: usize,
    pub mean_nats: f64,
    /// Per-sample variance, not variance of the mean.
    pub var_nats2: f64,
    pub stderr: f64,
    pub seed: u64,
    /// Times a predictor probability was clamped to the floor.
    pub clamp_count: usize,
    /// Samples that hit a zero-probability conditioning event.
    pub off_support_count: usize,
    /// Analytic bound on the bias from truncating the noise-level
    /// integral at its lower edge, when the estimator has one.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub truncation_bias_bound: Option<f64>,
    /// Exact value of the target when an oracle could compute it.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub truth_nats: Option<f64>,
    pub config_hash: String,
}

impl EstimateRecord {
    /// Wraps an estimator result under a report-stable name.
    pub fn from_result(
        estimator: impl Into<String>,
        target: impl Into<String>,
        result: &EstimateResult,
        truth_nats: Option<f64>,
        config_hash: impl Into<String>,
    ) -> Self {
        Self {
            estimator: estimator.into(),
            target: target.into(),
            n_samples: result.n_samples,
            mean_nats: result.mean,
            var_nats2: result.variance,
            stderr: result.stderr,
            seed: result.seed,
            clamp_count: result.clamp_count,
            off_support_count: result.off_support_count,
            truncation_bias_bound: result.truncation_bias_bound,
            truth_nats,
            config_hash: config_hash.into(),
        }
    }
}

/// The JSON document a command run produces.
#[derive(Debug, Clone, serde::Serialize)]
pub struct Report {
    pub schema_version: u32,
    pub command: String,
    pub config_hash: String,
    pub seed: u64,
    /// Pass/fail checks; any failure turns the process exit code to 2.
    pub checks: Vec<IdentityCheck>,
    /// Per-target estimates (empty for commands that produce none).
    pub records: Vec<EstimateRecord>,
    /// Scalar and string aggregates, sorted by key.
    pub aggregates: BTreeMap<String, serde_json::Value>,
}

impl Report {
    pub fn new(command: impl Into<String>, config_hash: impl Into<String>, seed: u64) -> Self {
        Self {
            schema_version: REPORT_SCHEMA_VERSION,
            command: command.into(),
            config_hash: config_hash.into(),
            seed,
            checks: Vec::new(),
            records: Vec::new(),
            aggregates: BTreeMap::new(),
        }
    }

    /// Inserts a numeric aggregate.
    pub fn aggregate(&mut self, key: &str, value: f64) {
        self.aggregates.insert(
            key.to_string(),
            serde_json::Number::from_f64(value)
                .map(serde_json::Value::Number)
                .unwrap_or(serde_json::Value::Null),
        );
    }

    /// Inserts an integer aggregate.
    pub fn aggregate_count(&mut self, key: &str, value: usize) {
        self.aggregates
            .insert(key.to_string(), serde_json::Value::from(value as u64));
    }

    /// Inserts a string aggregate.
    pub fn aggregate_text(&mut self, key: &str, value: impl Into<String>) {
        self.aggregates
            .insert(key.to_string(), serde_json::Value::String(value.into()));
    }

    pub fn all_checks_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    /// Pretty JSON with a trailing newline.
    pub fn render_json(&self) -> Result<String> {
        let mut text = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Format(format!("report serialization: {e}")))?;
        text.push('\n');
        Ok(text)
    }

    /// Writes `report.json` into the output directory.
    pub fn write(&self, out_dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(out_dir)?;
        let path = out_dir.join("report.json");
        std::fs::write(&path, self.render_json()?)?;
        Ok(path)
    }
}

/// Writes a CSV table; every row must match the header width.
pub fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    if let Some(bad) = rows.iter().find(|r| r.len() != header.len()) {
        return Err(Error::InvalidArgument(format!(
            "csv row has {} fields, header has {}",
            bad.len(),
            header.len()
        )));
    }
    let mut writer = csv::Writer::from_path(path)
        .map_err(|e| Error::Format(format!("open {}: {e}", path.display())))?;
    writer
        .write_record(header)
        .map_err(|e| Error::Format(format!("csv header: {e}")))?;
    for row in rows {
        writer
            .write_record(row)
            .map_err(|e| Error::Format(format!("csv row: {e}")))?;
    }
    writer
        .flush()
        .map_err(|e| Error::Format(format!("csv flush: {e}")))?;
    Ok(())
}
