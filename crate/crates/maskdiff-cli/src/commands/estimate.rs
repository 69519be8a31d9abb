//! `estimate`: score chosen sequences with one likelihood estimator,
//! pairing every estimate with the oracle truth when it exists.

use maskdiff::estimators::{
    conditional_nll_time_free, conditional_nll_time_free_stratified, conditional_nll_time_integral,
    exact_subset_sum_nll, nll_ao_autoregressive, nll_lambda_importance, nll_time_free,
    nll_time_free_stratified, nll_time_integral, EstimateResult, FreePositionPolicy,
};
use maskdiff::quadrature::{QuadratureRule, QuadratureSpec};
use maskdiff::{Error, IndexSet, Result, Sequence};

use super::{
    config_stage, prefix_split, target_seed, truth_conditional_nll, truth_nll, Dataset,
    PredictorHandle,
};
use crate::config::{EstimateConfig, EstimatorKind};
use crate::metrics::{max_abs_error, pearson_r};
use crate::report::{write_csv, EstimateRecord, Report};
use crate::RunContext;

/// One estimator invocation on one (possibly conditioned) sequence.
fn estimate_one(
    cfg: &EstimateConfig,
    x: &Sequence,
    split: Option<&(IndexSet, IndexSet)>,
    predictor: &PredictorHandle,
    seed: u64,
    threads: usize,
) -> Result<EstimateResult> {
    let c = predictor.conditional();
    let unsupported = |what: &str| {
        Err(Error::Config(format!(
            "{what} does not support conditional estimation"
        )))
    };
    match (cfg.estimator, split) {
        (EstimatorKind::ExactSubsetSum, None) => {
            let exact = exact_subset_sum_nll(x, c)?;
            Ok(EstimateResult {
                mean: exact.nats,
                variance: 0.0,
                n_samples: 1,
                stderr: 0.0,
                seed,
                clamp_count: exact.clamp_count,
                off_support_count: 0,
                truncation_bias_bound: None,
            })
        }
        (EstimatorKind::ExactSubsetSum, Some(_)) => unsupported("the exact subset sum"),
        (EstimatorKind::TimeFree, None) => nll_time_free(x, c, cfg.n_samples, seed, threads),
        (EstimatorKind::TimeFree, Some((i1, i2))) => conditional_nll_time_free(
            x,
            i1,
            i2,
            c,
            cfg.n_samples,
            seed,
            threads,
            FreePositionPolicy::Reject,
        ),
        (EstimatorKind::TimeFreeStratified, None) => {
            nll_time_free_stratified(x, c, cfg.n_samples, seed, threads)
        }
        (EstimatorKind::TimeFreeStratified, Some((i1, i2))) => conditional_nll_time_free_stratified(
            x,
            i1,
            i2,
            c,
            cfg.n_samples,
            seed,
            threads,
            FreePositionPolicy::Reject,
        ),
        (EstimatorKind::TimeIntegral, split) => {
            let quad = QuadratureSpec::lambda_domain(
                QuadratureRule::CompositeGaussLegendre {
                    nodes: cfg.quad_nodes,
                    panels: cfg.quad_panels,
                },
                cfg.eps,
            )?;
            match split {
                None => nll_time_integral(x, c, &quad, cfg.mc_per_node, seed, threads),
                Some((i1, i2)) => conditional_nll_time_integral(
                    x,
                    i1,
                    i2,
                    c,
                    &quad,
                    cfg.mc_per_node,
                    seed,
                    threads,
                    FreePositionPolicy::Reject,
                ),
            }
        }
        (EstimatorKind::LambdaImportance, None) => {
            nll_lambda_importance(x, c, cfg.eps, cfg.n_samples, seed, threads)
        }
        (EstimatorKind::LambdaImportance, Some(_)) => unsupported("noise-level importance sampling"),
        (EstimatorKind::AoAutoregressive, None) => {
            nll_ao_autoregressive(x, c, cfg.n_samples, seed, threads)
        }
        (EstimatorKind::AoAutoregressive, Some(_)) => unsupported("order sampling"),
    }
}

pub fn run(cfg: &EstimateConfig, ctx: &RunContext) -> Result<Report> {
    cfg.validate()?;
    let dataset = config_stage(Dataset::build(&cfg.dataset), "dataset")?;
    let oracle = dataset.oracle()?;
    let predictor = PredictorHandle::build(&cfg.predictor, &dataset)?;
    let sequences = dataset.select_sequences(&cfg.sequences)?;
    let split = cfg
        .conditional
        .as_ref()
        .map(|c| prefix_split(dataset.sequence_len(), c.prefix_len))
        .transpose()?;

    let mut report = Report::new("estimate", &ctx.config_hash, cfg.seed);
    let mut rows = Vec::with_capacity(sequences.len());
    let mut estimates = Vec::with_capacity(sequences.len());
    let mut truths = Vec::with_capacity(sequences.len());
    let mut total_clamps = 0usize;
    for (i, x) in sequences.iter().enumerate() {
        let seed = target_seed(cfg.seed, i);
        let result = estimate_one(cfg, x, split.as_ref(), &predictor, seed, ctx.threads)?;
        let truth = match &cfg.conditional {
            Some(c) => truth_conditional_nll(&oracle, x, c.prefix_len)?,
            None => truth_nll(&oracle, x)?,
        };
        let id = format!("seq-{i:04}");
        total_clamps += result.clamp_count;
        rows.push(vec![
            id.clone(),
            dataset.alphabet().render_sequence(x),
            result.mean.to_string(),
            truth.map(|t| t.to_string()).unwrap_or_default(),
            truth
                .map(|t| (result.mean - t).abs().to_string())
                .unwrap_or_default(),
            result.stderr.to_string(),
            result.variance.to_string(),
            result.n_samples.to_string(),
            result.clamp_count.to_string(),
            result.off_support_count.to_string(),
        ]);
        estimates.push(result.mean);
        if let Some(t) = truth {
            truths.push(t);
        }
        report.records.push(EstimateRecord::from_result(
            cfg.estimator.name(),
            id,
            &result,
            truth,
            &ctx.config_hash,
        ));
    }

    std::fs::create_dir_all(&ctx.out_dir)?;
    write_csv(
        &ctx.out_dir.join("estimates.csv"),
        &[
            "id",
            "sequence",
            "estimate_nats",
            "truth_nats",
            "abs_error",
            "stderr",
            "var_nats2",
            "n_samples",
            "clamp_count",
            "off_support_count",
        ],
        &rows,
    )?;

    report.aggregate_count("n_items", sequences.len());
    report.aggregate_count("total_clamps", total_clamps);
    report.aggregate_text("estimator", cfg.estimator.name());
    if truths.len() == estimates.len() {
        if let Some(r) = pearson_r(&estimates, &truths) {
            report.aggregate("pearson_r", r);
        }
        if let Some(worst) = max_abs_error(&estimates, &truths) {
            report.aggregate("max_abs_error", worst);
        }
        let mean_abs = estimates
            .iter()
            .zip(&truths)
            .map(|(e, t)| (e - t).abs())
            .sum::<f64>()
            / estimates.len().max(1) as f64;
        report.aggregate("mean_abs_error", mean_abs);
    }
    Ok(report)
}
