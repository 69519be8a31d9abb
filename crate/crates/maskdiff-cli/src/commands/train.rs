//! `train`: fit a conditional predictor to a sequence file, writing a
//! checkpoint, resumable optimizer state, and the loss curve.

use maskdiff::datagen::read_sequence_file;
use maskdiff::predictor::LearnedPredictor;
use maskdiff::train::{train_dce, ResumeState, TrainingSet};
use maskdiff::{Alphabet, Result};

use super::{config_stage, step_path};
use crate::config::{TrainCommandConfig, TrainPredictorSpec};
use crate::report::{write_csv, Report};
use crate::RunContext;

/// Window for the smoothed final loss reported as an aggregate.
const SMOOTHING_WINDOW: usize = 100;

pub fn run(cfg: &TrainCommandConfig, ctx: &RunContext) -> Result<Report> {
    cfg.validate()?;
    let alphabet = config_stage(Alphabet::new(&cfg.alphabet), "alphabet")?;
    let sequences = config_stage(read_sequence_file(&cfg.data, &alphabet), "training data")?;
    let n = alphabet.len();
    let len = sequences[0].len();

    let (predictor, resume) = match &cfg.resume {
        Some(r) => {
            let predictor =
                config_stage(LearnedPredictor::load(&r.checkpoint), "resume checkpoint")?;
            let state = config_stage(ResumeState::load(&r.state), "resume state")?;
            (predictor, Some(state))
        }
        None => {
            let predictor = match &cfg.predictor {
                TrainPredictorSpec::Mixture(m) => {
                    let mut p = LearnedPredictor::new_mixture(n, len, m.components, m.seed)?;
                    if m.warm_start {
                        p.init_mixture_from_data(&sequences, m.sharpening)?;
                    }
                    p
                }
                TrainPredictorSpec::Mlp(m) => {
                    LearnedPredictor::new_mlp(n, len, m.embed_dim, m.hidden, m.seed)?
                }
            };
            (predictor, None)
        }
    };
    let start_step = resume.as_ref().map_or(0, |r| r.next_step);

    std::fs::create_dir_all(&ctx.out_dir)?;
    let out_dir = ctx.out_dir.clone();
    let base = cfg.checkpoint_name.clone();
    let mut save_periodic = |step: usize, p: &LearnedPredictor, s: &ResumeState| -> Result<()> {
        p.save(&step_path(&out_dir, &base, step, "ckpt"))?;
        s.save(&step_path(&out_dir, &base, step, "state"))?;
        Ok(())
    };
    let callback = if cfg.train.checkpoint_interval > 0 {
        Some(&mut save_periodic as &mut dyn FnMut(usize, &LearnedPredictor, &ResumeState) -> Result<()>)
    } else {
        None
    };

    let training = TrainingSet::Empirical(sequences);
    let outcome = train_dce(predictor, &training, &cfg.train, resume, callback)?;

    let ckpt_path = ctx.out_dir.join(format!("{}.ckpt", cfg.checkpoint_name));
    let state_path = ctx.out_dir.join(format!("{}.state", cfg.checkpoint_name));
    outcome.predictor.save(&ckpt_path)?;
    outcome.resume.save(&state_path)?;

    let loss_rows: Vec<Vec<String>> = outcome
        .losses
        .iter()
        .enumerate()
        .map(|(i, loss)| vec![(start_step + i).to_string(), loss.to_string()])
        .collect();
    write_csv(&ctx.out_dir.join("loss.csv"), &["step", "loss"], &loss_rows)?;

    let tail = outcome
        .losses
        .iter()
        .rev()
        .take(SMOOTHING_WINDOW)
        .sum::<f64>()
        / outcome.losses.len().min(SMOOTHING_WINDOW).max(1) as f64;

    let mut report = Report::new("train", &ctx.config_hash, cfg.train.seed);
    report.aggregate_count("start_step", start_step);
    report.aggregate_count("steps_executed", outcome.losses.len());
    report.aggregate_count("parameters", outcome.predictor.params().len());
    if let Some(&last) = outcome.losses.last() {
        report.aggregate("final_loss", last);
    }
    report.aggregate("final_smoothed_loss", tail);
    report.aggregate_text("checkpoint", format!("{}.ckpt", cfg.checkpoint_name));
    report.aggregate_text("state", format!("{}.state", cfg.checkpoint_name));
    Ok(report)
}
