//! `audit`: score conditional likelihoods of true continuations against
//! continuations from an independent generator, reporting how well the
//! two groups separate.
//!
//! Prompts are windows of the matched Markov corpus. For each prompt
//! the true continuation is the window's own suffix; the "independent"
//! continuation replaces that suffix with an ancestral walk of a second
//! chain (different transition tables unless the null case is forced)
//! started from the same prefix. Both sequences are scored with the
//! Monte Carlo conditional estimator and separation is summarized as
//! the area under the ROC curve.

use maskdiff::datagen::{build_markov, draw_training_sequences, MarkovCorpusSpec, TrainingSource};
use maskdiff::estimators::{conditional_nll_time_free, FreePositionPolicy};
use maskdiff::oracle::MarkovChainModel;
use maskdiff::rng::substream;
use maskdiff::{Error, Result, Sequence};
use rand::Rng;

use super::{config_stage, prefix_split, target_seed, truth_conditional_nll, Dataset, PredictorHandle};
use crate::config::{AuditConfig, DatasetSpec};
use crate::metrics::auroc;
use crate::report::{write_csv, EstimateRecord, Report};
use crate::RunContext;

/// Substream id for continuation draws, disjoint from the dataset
/// generation streams.
const STREAM_CONTINUATIONS: u64 = 64;

/// Ancestral continuation of `prefix` under `model`.
fn sample_continuation<G: Rng>(
    model: &MarkovChainModel,
    prefix: &[u16],
    steps: usize,
    rng: &mut G,
) -> Vec<u16> {
    let k = model.order();
    let mut ctx = model.pack(&prefix[prefix.len() - k..]);
    let mut out = Vec::with_capacity(steps);
    for _ in 0..steps {
        let row = &model.transitions()[ctx];
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut token = (row.len() - 1) as u16;
        for (t, &p) in row.iter().enumerate() {
            acc += p;
            if u < acc {
                token = t as u16;
                break;
            }
        }
        out.push(token);
        ctx = model.shift(ctx, token);
    }
    out
}

pub fn run(cfg: &AuditConfig, ctx: &RunContext) -> Result<Report> {
    cfg.validate()?;
    if cfg.prefix_len < cfg.markov.order {
        return Err(Error::Config(format!(
            "prefix length {} is shorter than the chain order {}",
            cfg.prefix_len, cfg.markov.order
        )));
    }
    let dataset = config_stage(
        Dataset::build(&DatasetSpec::Markov(cfg.markov.clone())),
        "markov generator",
    )?;
    let Dataset::Markov { data: matched, window, .. } = &dataset else {
        unreachable!("built from a markov spec");
    };
    let window = *window;
    let oracle = dataset.oracle()?;
    let predictor = PredictorHandle::build(&cfg.predictor, &dataset)?;
    let c = predictor.conditional();

    let independent = if cfg.null_case {
        matched.model.clone()
    } else {
        let spec = MarkovCorpusSpec {
            seed: cfg.mismatched_seed,
            temperature: cfg.mismatched_temperature,
            corpus_len: window,
            ..cfg.markov.clone()
        };
        config_stage(build_markov(&spec), "independent generator")?.model
    };

    let prompts = draw_training_sequences(
        &TrainingSource::MarkovWindows {
            corpus: &matched.corpus,
            alphabet_size: matched.model.alphabet_size(),
            window,
        },
        cfg.n_prompts,
        cfg.seed,
    )?;
    let (i1, i2) = prefix_split(window, cfg.prefix_len)?;
    let mut continuation_rng = substream(cfg.seed, STREAM_CONTINUATIONS);

    let mut report = Report::new("audit", &ctx.config_hash, cfg.seed);
    let mut rows = Vec::with_capacity(2 * prompts.len());
    let mut matched_nll = Vec::with_capacity(prompts.len());
    let mut independent_nll = Vec::with_capacity(prompts.len());
    for (i, window_seq) in prompts.iter().enumerate() {
        let prefix = &window_seq.tokens()[..cfg.prefix_len];
        let continuation = sample_continuation(
            &independent,
            prefix,
            window - cfg.prefix_len,
            &mut continuation_rng,
        );
        let mut alt_tokens = prefix.to_vec();
        alt_tokens.extend_from_slice(&continuation);
        let alt_seq = Sequence::new(alt_tokens, matched.model.alphabet_size())?;

        for (group, x) in [("matched", window_seq), ("independent", &alt_seq)] {
            let seed = target_seed(cfg.seed, 2 * i + usize::from(group == "independent"));
            let result = conditional_nll_time_free(
                x,
                &i1,
                &i2,
                c,
                cfg.n_samples,
                seed,
                ctx.threads,
                FreePositionPolicy::Reject,
            )?;
            let truth = truth_conditional_nll(&oracle, x, cfg.prefix_len)?;
            if group == "matched" {
                matched_nll.push(result.mean);
            } else {
                independent_nll.push(result.mean);
            }
            let id = format!("prompt-{i:04}-{group}");
            rows.push(vec![
                id.clone(),
                group.to_string(),
                dataset.alphabet().render_sequence(x),
                result.mean.to_string(),
                truth.map(|t| t.to_string()).unwrap_or_default(),
                result.stderr.to_string(),
            ]);
            report.records.push(EstimateRecord::from_result(
                "time-free-conditional",
                id,
                &result,
                truth,
                &ctx.config_hash,
            ));
        }
    }

    std::fs::create_dir_all(&ctx.out_dir)?;
    write_csv(
        &ctx.out_dir.join("audit.csv"),
        &["id", "group", "sequence", "estimate_nats", "truth_nats", "stderr"],
        &rows,
    )?;

    let mean = |xs: &[f64]| xs.iter().sum::<f64>() / xs.len().max(1) as f64;
    report.aggregate_count("n_prompts", prompts.len());
    report.aggregate("mean_matched_nll", mean(&matched_nll));
    report.aggregate("mean_independent_nll", mean(&independent_nll));
    report.aggregate(
        "nll_gap",
        mean(&independent_nll) - mean(&matched_nll),
    );
    if let Some(a) = auroc(&independent_nll, &matched_nll) {
        report.aggregate("auroc", a);
    }
    report.aggregate_text(
        "mode",
        if cfg.null_case { "null" } else { "independent" },
    );
    Ok(report)
}
