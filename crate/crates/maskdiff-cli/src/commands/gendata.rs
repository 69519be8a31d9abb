//! `gen-data`: materialize a synthetic dataset as a plain-text sequence
//! file plus a JSON manifest with its checksum.

use maskdiff::datagen::{draw_training_set, manifest_path};
use maskdiff::{Error, Result};

use super::{config_stage, Dataset};
use crate::config::GenDataConfig;
use crate::report::Report;
use crate::RunContext;

pub fn run(cfg: &GenDataConfig, ctx: &RunContext) -> Result<Report> {
    cfg.validate()?;
    let dataset = config_stage(Dataset::build(&cfg.dataset), "dataset")?;
    std::fs::create_dir_all(&ctx.out_dir)?;
    let data_path = ctx.out_dir.join(&cfg.file_name);
    let spec_json = serde_json::to_value(&cfg.dataset)
        .map_err(|e| Error::Config(format!("serialize dataset spec: {e}")))?;
    let manifest = draw_training_set(
        &dataset.training_source(),
        cfg.n_sequences,
        cfg.seed,
        dataset.alphabet(),
        spec_json,
        &data_path,
    )?;

    let mut report = Report::new("gen-data", &ctx.config_hash, cfg.seed);
    report.aggregate_count("n_sequences", manifest.n_sequences);
    report.aggregate_count("sequence_len", manifest.len);
    report.aggregate_text("sha256", &manifest.sha256);
    report.aggregate_text("data_file", cfg.file_name.clone());
    report.aggregate_text(
        "manifest_file",
        manifest_path(std::path::Path::new(&cfg.file_name))
            .display()
            .to_string(),
    );
    Ok(report)
}
