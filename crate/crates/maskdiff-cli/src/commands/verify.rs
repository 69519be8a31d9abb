//! `verify-identities`: run the exact-oracle identity suite on a small
//! instance and report every check's worst deviation.

use maskdiff::identities::{
    default_uniform_check_instance, representative_atoms, run_identity_suite, SuiteOptions,
};
use maskdiff::Result;

use super::{config_stage, Dataset};
use crate::config::VerifyConfig;
use crate::report::{write_csv, Report};
use crate::RunContext;

/// Log-space corruption injected when the negative test is requested;
/// far above every optimality margin the suite tolerates.
const NEGATIVE_TEST_CORRUPTION: f64 = 0.05;

pub fn run(cfg: &VerifyConfig, ctx: &RunContext) -> Result<Report> {
    cfg.validate()?;
    let dataset = config_stage(Dataset::build(&cfg.instance), "instance")?;
    let oracle = dataset.oracle()?;
    let atoms = representative_atoms(&oracle, cfg.check_atoms)?;
    let uniform = if cfg.uniform_side {
        Some(default_uniform_check_instance()?)
    } else {
        None
    };
    let opts = SuiteOptions {
        sigma: cfg.sigma,
        n_perturbations: cfg.n_perturbations,
        dce_corruption: if cfg.corrupt_predictor {
            NEGATIVE_TEST_CORRUPTION
        } else {
            0.0
        },
        seed: cfg.seed,
        route_points: cfg.route_points,
    };
    let checks = run_identity_suite(
        &oracle,
        &atoms,
        uniform.as_ref().map(|(d, xs)| (d, xs.as_slice())),
        &opts,
    )?;

    let mut report = Report::new("verify-identities", &ctx.config_hash, cfg.seed);
    report.aggregate_count("checks_total", checks.len());
    report.aggregate_count("checks_passed", checks.iter().filter(|c| c.passed).count());
    report.aggregate(
        "worst_deviation",
        checks
            .iter()
            .map(|c| c.max_deviation)
            .fold(0.0_f64, f64::max),
    );
    report.aggregate_count("check_sequences", atoms.len());

    std::fs::create_dir_all(&ctx.out_dir)?;
    let rows: Vec<Vec<String>> = checks
        .iter()
        .map(|c| {
            vec![
                c.name.to_string(),
                c.max_deviation.to_string(),
                c.tolerance.to_string(),
                c.passed.to_string(),
            ]
        })
        .collect();
    write_csv(
        &ctx.out_dir.join("checks.csv"),
        &["check", "max_deviation", "tolerance", "passed"],
        &rows,
    )?;
    report.checks = checks;
    Ok(report)
}
