//! `maskdiff`: likelihood identities, estimators, and toy experiments
//! for masked discrete diffusion.
//!
//! Every subcommand reads an optional JSON config, writes a
//! deterministic `report.json` (plus CSV tables and checkpoints) into
//! the output directory, and prints the report to stdout. Wall-clock
//! timing goes to stderr so reruns stay byte-identical.

use std::path::PathBuf;
use std::time::Instant;

use clap::{Parser, Subcommand};
use maskdiff_cli::config::{
    self, AuditConfig, EstimateConfig, GenDataConfig, TrainCommandConfig, VarianceConfig,
    VerifyConfig,
};
use maskdiff_cli::report::Report;
use maskdiff_cli::{commands, exit_code_for, RunContext, EXIT_CHECK_FAILED};

#[derive(Parser)]
#[command(
    name = "maskdiff",
    version,
    about = "Likelihood identities and estimators for masked discrete diffusion"
)]
struct Cli {
    /// JSON config file; the command's defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override the config's seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Directory for reports, tables, and checkpoints.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Monte Carlo worker threads; results are identical for any value.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    /// Refuse to run unless the effective config hashes to this value.
    #[arg(long, global = true)]
    expect_hash: Option<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the exact-oracle identity suite and report deviations.
    VerifyIdentities,
    /// Fit a conditional predictor to a sequence file.
    Train,
    /// Estimate (conditional) log-likelihoods for chosen sequences.
    Estimate,
    /// Compare Monte Carlo variances across estimator families.
    VarianceStudy,
    /// Score matched vs independent continuations and report separation.
    Audit,
    /// Generate a synthetic dataset plus its manifest.
    GenData,
}

fn main() {
    std::process::exit(run());
}

fn run() -> i32 {
    let cli = Cli::parse();
    let started = Instant::now();
    let outcome = dispatch(&cli);
    let elapsed = started.elapsed().as_secs_f64();
    match outcome {
        Ok(report) => {
            match report.render_json() {
                Ok(text) => print!("{text}"),
                Err(e) => {
                    eprintln!("error: {e}");
                    return 1;
                }
            }
            eprintln!("runtime: {elapsed:.3}s");
            if report.all_checks_passed() {
                0
            } else {
                let failed: Vec<&str> = report
                    .checks
                    .iter()
                    .filter(|c| !c.passed)
                    .map(|c| c.name)
                    .collect();
                eprintln!("failed checks: {}", failed.join(", "));
                EXIT_CHECK_FAILED
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            eprintln!("runtime: {elapsed:.3}s");
            exit_code_for(&e)
        }
    }
}

/// Loads the command's config, applies the seed override, verifies the
/// expected hash if given, runs the command, and writes its report.
macro_rules! run_command {
    ($cli:expr, $cfg_ty:ty, $module:path) => {{
        let mut cfg: $cfg_ty = config::load($cli.config.as_deref())?;
        if let Some(seed) = $cli.seed {
            cfg.override_seed(seed);
        }
        cfg.validate()?;
        let hash = config::hash(&cfg)?;
        if let Some(expected) = &$cli.expect_hash {
            if !expected.eq_ignore_ascii_case(&hash) {
                return Err(maskdiff::Error::Config(format!(
                    "config hash mismatch: expected {expected}, got {hash}"
                )));
            }
        }
        let ctx = RunContext::new(&$cli.out, $cli.threads, hash);
        let report = $module(&cfg, &ctx)?;
        report.write(&ctx.out_dir)?;
        Ok(report)
    }};
}

fn dispatch(cli: &Cli) -> maskdiff::Result<Report> {
    match cli.command {
        Command::VerifyIdentities => run_command!(cli, VerifyConfig, commands::verify::run),
        Command::Train => run_command!(cli, TrainCommandConfig, commands::train::run),
        Command::Estimate => run_command!(cli, EstimateConfig, commands::estimate::run),
        Command::VarianceStudy => run_command!(cli, VarianceConfig, commands::variance::run),
        Command::Audit => run_command!(cli, AuditConfig, commands::audit::run),
        Command::GenData => run_command!(cli, GenDataConfig, commands::gendata::run),
    }
}
