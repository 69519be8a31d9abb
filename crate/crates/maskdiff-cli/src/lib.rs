//! Library behind the `maskdiff` binary: experiment configs, report
//! serialization, and one module per subcommand.
//!
//! Every command is a pure function of `(config, seed)`: given the same
//! effective configuration it writes byte-identical reports, tables, and
//! checkpoints.  Wall-clock timing therefore goes to stderr only and is
//! never embedded in a report.

pub mod commands;
pub mod config;
pub mod metrics;
pub mod report;

use std::path::PathBuf;

/// Process exit code for a run whose report contains a failed check.
pub const EXIT_CHECK_FAILED: i32 = 2;
/// Process exit code for configuration problems (bad JSON, unknown keys,
/// missing input files, out-of-range values).
pub const EXIT_CONFIG_ERROR: i32 = 3;
/// Process exit code when an exact enumeration would exceed its cap.
pub const EXIT_CAP_EXCEEDED: i32 = 4;

/// Everything a command needs besides its own config.
#[derive(Debug, Clone)]
pub struct RunContext {
    /// Directory all outputs are written into (created on demand).
    pub out_dir: PathBuf,
    /// Worker threads for Monte Carlo estimators; results are identical
    /// for any value.
    pub threads: usize,
    /// Hex SHA-256 of the effective config, embedded in every report.
    pub config_hash: String,
}

impl RunContext {
    pub fn new(out_dir: impl Into<PathBuf>, threads: usize, config_hash: String) -> Self {
        Self {
            out_dir: out_dir.into(),
            threads: threads.max(1),
            config_hash,
        }
    }
}

/// Maps an error to the CLI exit code contract.
pub fn exit_code_for(error: &maskdiff::Error) -> i32 {
    match error {
        maskdiff::Error::Config(_) => EXIT_CONFIG_ERROR,
        maskdiff::Error::CapExceeded { .. } => EXIT_CAP_EXCEEDED,
        _ => 1,
    }
}
