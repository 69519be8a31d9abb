//! Stochastic training of a [`LearnedPredictor`] on the masked
//! cross-entropy objective.
//!
//! Each step draws a fresh batch: every batch slot is assigned a mask
//! level from a stratified grid over `(lambda_floor, 1)`, picks a clean
//! sequence from the training set, masks it with the forward kernel at
//! that level, and contributes the cross-entropy of the predictor's
//! conditionals at the masked positions.  By default every item has unit
//! weight (the stratified batch already spreads mask levels evenly);
//! setting [`TrainConfig::inverse_lambda_weight`] multiplies each item by
//! `1 / lambda` instead, which reweights the objective to the integrand
//! of the exact log-likelihood integral at the price of heavier tails.
//!
//! Updates use plain SGD with heavy-ball momentum and a linear-warmup /
//! cosine-decay learning-rate schedule.  Training is deterministic: step
//! `k` draws from its own counter-derived substream, so an interrupted
//! run resumed from a [`ResumeState`] reproduces the uninterrupted run
//! bit for bit, and two runs with the same seed produce byte-identical
//! parameter vectors.

use std::collections::hash_map::Entry;
use std::collections::{HashMap, HashSet};
use std::io::Write;
use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};
use crate::kernel::sample_forward;
use crate::predictor::{LearnedPredictor, TrainingItem};
use crate::rng;
use crate::types::Sequence;

/// Offset added to the per-step counter when deriving a step's random
/// substream, keeping training streams disjoint from the small stream
/// ids used by dataset generation.
const TRAIN_STREAM_BASE: u64 = 1 << 32;

/// Header line identifying a serialized [`ResumeState`].
const RESUME_HEADER: &str = "maskdiff-train-state v1";

/// Central-difference step used by [`gradient_audit`].
const AUDIT_FD_STEP: f64 = 1e-5;

/// Relative mismatch allowed between analytic and numeric derivatives
/// at coordinates with non-negligible magnitude.
const AUDIT_RELATIVE_TOLERANCE: f64 = 1e-5;

/// Absolute mismatch allowed where both derivatives are tiny and a
/// relative comparison would be meaningless.
const AUDIT_ABSOLUTE_TOLERANCE: f64 = 1e-7;

/// Magnitude below which a coordinate is compared absolutely.
const AUDIT_SCALE_FLOOR: f64 = 1e-6;

/// Hyper-parameters for [`train_dce`].
///
/// The defaults are the settings used by the bundled experiment configs;
/// every field can be overridden from JSON, and unknown keys are
/// rejected.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Total number of optimizer steps.
    pub steps: usize,
    /// Items drawn per step.
    pub batch_size: usize,
    /// Peak learning rate reached at the end of warmup.
    pub learning_rate: f64,
    /// Heavy-ball momentum coefficient in `[0, 1)`.
    pub momentum: f64,
    /// Steps of linear learning-rate warmup before cosine decay.
    pub warmup_steps: usize,
    /// Number of equal-width mask-level strata per batch.
    pub lambda_strata: usize,
    /// Lower edge of the sampled mask-level range; keeps the
    /// `1 / lambda` weight bounded when the reweighted form is used.
    pub lambda_floor: f64,
    /// Weight each item by `1 / lambda` instead of the default unit
    /// weight.
    pub inverse_lambda_weight: bool,
    /// Draw clean sequences uniformly over the *distinct* sequences in
    /// the training set, multiplying each item's loss by its original
    /// probability mass times the distinct count.  Rare sequences then
    /// receive gradient signal every batch while the objective stays
    /// identical to frequency-proportional sampling.
    pub balanced_sampling: bool,
    /// Root seed for all batch randomness.
    pub seed: u64,
    /// Invoke the checkpoint callback every this many steps (0 = never).
    pub checkpoint_interval: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 24_000,
            batch_size: 512,
            learning_rate: 0.2,
            momentum: 0.9,
            warmup_steps: 300,
            lambda_strata: 8,
            lambda_floor: 1e-4,
            inverse_lambda_weight: false,
            balanced_sampling: false,
            seed: 0,
            checkpoint_interval: 0,
        }
    }
}

impl TrainConfig {
    /// Checks the numeric ranges every field must satisfy.
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::InvalidArgument("steps must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument(
                "batch size must be positive".into(),
            ));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "learning rate {} must be positive and finite",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidArgument(format!(
                "momentum {} outside [0, 1)",
                self.momentum
            )));
        }
        if self.warmup_steps > self.steps {
            return Err(Error::InvalidArgument(format!(
                "warmup ({}) exceeds total steps ({})",
                self.warmup_steps, self.steps
            )));
        }
        if self.lambda_strata == 0 || self.lambda_strata > self.batch_size {
            return Err(Error::InvalidArgument(format!(
                "lambda strata ({}) must lie in 1..=batch size ({})",
                self.lambda_strata, self.batch_size
            )));
        }
        if !(0.0..=0.5).contains(&self.lambda_floor) {
            return Err(Error::InvalidArgument(format!(
                "lambda floor {} outside [0, 0.5]",
                self.lambda_floor
            )));
        }
        if self.inverse_lambda_weight && self.lambda_floor <= 0.0 {
            return Err(Error::InvalidArgument(
                "inverse-lambda weighting needs a positive lambda floor".into(),
            ));
        }
        Ok(())
    }
}

/// Clean sequences to train on.
#[derive(Debug, Clone)]
pub enum TrainingSet {
    /// A plain sample; items are drawn uniformly (with repetition
    /// counting, so duplicates are proportionally more likely).
    Empirical(Vec<Sequence>),
    /// Sequences with explicit positive weights; items are drawn
    /// proportionally to weight.
    Weighted(Vec<(Sequence, f64)>),
}

impl TrainingSet {
    fn validate(&self) -> Result<()> {
        let shapes: Vec<(usize, u16)> = match self {
            Self::Empirical(items) => items
                .iter()
                .map(|x| (x.len(), x.alphabet_size()))
                .collect(),
            Self::Weighted(items) => {
                for (_, w) in items {
                    if !(w.is_finite() && *w > 0.0) {
                        return Err(Error::InvalidArgument(format!(
                            "training weight {w} must be positive and finite"
                        )));
                    }
                }
                items
                    .iter()
                    .map(|(x, _)| (x.len(), x.alphabet_size()))
                    .collect()
            }
        };
        let Some(&first) = shapes.first() else {
            return Err(Error::InvalidArgument("empty training set".into()));
        };
        if shapes.iter().any(|&s| s != first) {
            return Err(Error::InvalidArgument(
                "training sequences disagree on length or alphabet".into(),
            ));
        }
        Ok(())
    }
}

/// How a batch slot picks its clean sequence, along with the importance
/// factor the slot's loss is multiplied by so the sampling scheme never
/// changes the objective being minimized.
enum AtomPicker {
    /// Uniform over the stored list; each entry carries its importance.
    Uniform(Vec<(Sequence, f64)>),
    /// Inverse-CDF sampling over normalized weights; importance 1.
    Cdf(Vec<Sequence>, Vec<f64>),
}

impl AtomPicker {
    fn build(data: &TrainingSet, balanced: bool) -> Self {
        match (data, balanced) {
            (TrainingSet::Empirical(items), false) => {
                Self::Uniform(items.iter().map(|x| (x.clone(), 1.0)).collect())
            }
            (TrainingSet::Empirical(items), true) => {
                let weighted: Vec<(Sequence, f64)> =
                    items.iter().map(|x| (x.clone(), 1.0)).collect();
                Self::Uniform(balanced_atoms(&weighted))
            }
            (TrainingSet::Weighted(items), true) => Self::Uniform(balanced_atoms(items)),
            (TrainingSet::Weighted(items), false) => {
                let atoms: Vec<Sequence> = items.iter().map(|(x, _)| x.clone()).collect();
                let total: f64 = items.iter().map(|(_, w)| w).sum();
                let mut cdf = Vec::with_capacity(items.len());
                let mut acc = 0.0;
                let mut compensation = 0.0;
                for (_, w) in items {
                    let term = w / total - compensation;
                    let next = acc + term;
                    compensation = (next - acc) - term;
                    acc = next;
                    cdf.push(acc);
                }
                if let Some(last) = cdf.last_mut() {
                    *last = 1.0;
                }
                Self::Cdf(atoms, cdf)
            }
        }
    }

    fn pick<G: Rng>(&self, rng: &mut G) -> (&Sequence, f64) {
        match self {
            Self::Uniform(atoms) => {
                let (x, importance) = &atoms[rng.random_range(0..atoms.len())];
                (x, *importance)
            }
            Self::Cdf(atoms, cdf) => {
                let u: f64 = rng.random();
                let idx = cdf.partition_point(|&c| c < u).min(cdf.len() - 1);
                (&atoms[idx], 1.0)
            }
        }
    }
}

/// Deduplicates to one entry per distinct token vector (accumulating
/// duplicate mass) and attaches the importance factor `pᵢ · M` that makes
/// uniform picks over the `M` distinct atoms an unbiased reweighting of
/// the original measure.  Rare atoms are visited as often as common ones
/// but contribute proportionally small gradients.
fn balanced_atoms(items: &[(Sequence, f64)]) -> Vec<(Sequence, f64)> {
    let mut index: HashMap<Vec<u16>, usize> = HashMap::new();
    let mut out: Vec<(Sequence, f64)> = Vec::new();
    for (x, w) in items {
        match index.entry(x.tokens().to_vec()) {
            Entry::Occupied(slot) => out[*slot.get()].1 += w,
            Entry::Vacant(slot) => {
                slot.insert(out.len());
                out.push((x.clone(), *w));
            }
        }
    }
    let total: f64 = out.iter().map(|(_, w)| w).sum();
    let scale = out.len() as f64 / total;
    for (_, w) in &mut out {
        *w *= scale;
    }
    out
}

/// Optimizer state carried across an interruption.
///
/// Resuming with the state saved after step `k` reproduces steps
/// `k+1..` of the uninterrupted run exactly, because each step's batch
/// randomness depends only on the seed and the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct ResumeState {
    /// Heavy-ball velocity, one entry per parameter.
    pub velocity: Vec<f64>,
    /// Index of the next step to execute.
    pub next_step: usize,
}

impl ResumeState {
    /// Writes a versioned header line followed by the velocity as
    /// little-endian 64-bit floats.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut file = std::fs::File::create(path)?;
        writeln!(file, "{RESUME_HEADER} {} {}", self.next_step, self.velocity.len())?;
        let mut bytes = Vec::with_capacity(self.velocity.len() * 8);
        for &v in &self.velocity {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        file.write_all(&bytes)?;
        Ok(())
    }

    /// Reads a [`save`](Self::save)d state, validating the header and
    /// the block length.
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        let newline = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::Format("train state missing header line".into()))?;
        let header = std::str::from_utf8(&bytes[..newline])
            .map_err(|_| Error::Format("train state header is not UTF-8".into()))?;
        let fields: Vec<&str> = header.split_whitespace().collect();
        if fields.len() != 4 || fields[0] != "maskdiff-train-state" || fields[1] != "v1" {
            return Err(Error::Format(format!("unexpected header {header:?}")));
        }
        let next_step: usize = fields[2]
            .parse()
            .map_err(|_| Error::Format(format!("bad step counter {:?}", fields[2])))?;
        let len: usize = fields[3]
            .parse()
            .map_err(|_| Error::Format(format!("bad velocity length {:?}", fields[3])))?;
        let body = &bytes[newline + 1..];
        if body.len() != len * 8 {
            return Err(Error::Format(format!(
                "velocity block is {} bytes, expected {}",
                body.len(),
                len * 8
            )));
        }
        let mut velocity = Vec::with_capacity(len);
        for chunk in body.chunks_exact(8) {
            let mut raw = [0u8; 8];
            raw.copy_from_slice(chunk);
            velocity.push(f64::from_le_bytes(raw));
        }
        Ok(Self { velocity, next_step })
    }
}

/// Everything a completed (or interrupted-and-finished) run produces.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// The predictor after the final executed step.
    pub predictor: LearnedPredictor,
    /// Pre-update batch loss at every executed step, in order.
    pub losses: Vec<f64>,
    /// State from which a longer run could continue seamlessly.
    pub resume: ResumeState,
}

/// Learning rate for `step` (0-based): linear warmup to the configured
/// peak, then cosine decay towards zero at `steps`.
pub fn learning_rate_at(cfg: &TrainConfig, step: usize) -> f64 {
    if step < cfg.warmup_steps {
        return cfg.learning_rate * (step + 1) as f64 / cfg.warmup_steps as f64;
    }
    let span = (cfg.steps - cfg.warmup_steps).max(1) as f64;
    let progress = (step - cfg.warmup_steps) as f64 / span;
    cfg.learning_rate * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Draws the batch for `step`.  All of the step's randomness comes from
/// one substream keyed by the step counter, in a fixed per-item order:
/// mask-level jitter, sequence pick, then one masking draw per token.
fn draw_batch(cfg: &TrainConfig, picker: &AtomPicker, step: usize) -> Result<Vec<TrainingItem>> {
    let mut stream = rng::substream(cfg.seed, TRAIN_STREAM_BASE + step as u64);
    let strata = cfg.lambda_strata as f64;
    let mut batch = Vec::with_capacity(cfg.batch_size);
    for slot in 0..cfg.batch_size {
        let stratum = (slot % cfg.lambda_strata) as f64;
        let jitter: f64 = stream.random();
        let lambda = cfg.lambda_floor + (1.0 - cfg.lambda_floor) * (stratum + jitter) / strata;
        let (picked, importance) = picker.pick(&mut stream);
        let clean = picked.clone();
        let masked = sample_forward(&clean, lambda, &mut stream)?;
        let weight = importance
            * if cfg.inverse_lambda_weight {
                1.0 / lambda
            } else {
                1.0
            };
        batch.push(TrainingItem {
            clean,
            masked,
            weight,
        });
    }
    Ok(batch)
}

/// Runs (or resumes) masked cross-entropy training.
///
/// `on_checkpoint` is invoked with the 1-based step count after every
/// [`TrainConfig::checkpoint_interval`] steps, receiving the current
/// predictor and a [`ResumeState`] sufficient to continue from exactly
/// that point.  Training aborts with [`Error::Diverged`] as soon as a
/// batch loss stops being finite.
pub fn train_dce(
    mut predictor: LearnedPredictor,
    data: &TrainingSet,
    cfg: &TrainConfig,
    resume: Option<ResumeState>,
    mut on_checkpoint: Option<&mut dyn FnMut(usize, &LearnedPredictor, &ResumeState) -> Result<()>>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    data.validate()?;
    let (mut velocity, start) = match resume {
        Some(state) => {
            if state.velocity.len() != predictor.params().len() {
                return Err(Error::InvalidArgument(format!(
                    "resume velocity has {} entries, predictor has {} parameters",
                    state.velocity.len(),
                    predictor.params().len()
                )));
            }
            if state.next_step > cfg.steps {
                return Err(Error::InvalidArgument(format!(
                    "resume step {} beyond configured total {}",
                    state.next_step, cfg.steps
                )));
            }
            (state.velocity, state.next_step)
        }
        None => (vec![0.0; predictor.params().len()], 0),
    };

    let picker = AtomPicker::build(data, cfg.balanced_sampling);
    let mut losses = Vec::with_capacity(cfg.steps - start);
    for step in start..cfg.steps {
        let batch = draw_batch(cfg, &picker, step)?;
        let (loss, grad) = predictor.loss_and_grad(&batch)?;
        if !loss.is_finite() {
            return Err(Error::Diverged { step, loss });
        }
        losses.push(loss);

        let lr = learning_rate_at(cfg, step);
        let params = predictor.params_mut();
        for (j, g) in grad.iter().enumerate() {
            velocity[j] = cfg.momentum * velocity[j] - lr * g;
            params[j] += velocity[j];
        }

        if cfg.checkpoint_interval > 0 && (step + 1) % cfg.checkpoint_interval == 0 {
            if let Some(callback) = on_checkpoint.as_mut() {
                let state = ResumeState {
                    velocity: velocity.clone(),
                    next_step: step + 1,
                };
                callback(step + 1, &predictor, &state)?;
            }
        }
    }

    Ok(TrainOutcome {
        predictor,
        losses,
        resume: ResumeState {
            velocity,
            next_step: cfg.steps,
        },
    })
}

/// Result of checking analytic gradients against central differences.
#[derive(Debug, Clone)]
pub struct GradientAudit {
    /// Parameter coordinates that were probed.
    pub coordinates: Vec<usize>,
    /// Worst relative mismatch over coordinates with magnitude above
    /// the comparison floor (0 when none were).
    pub worst_relative: f64,
    /// Worst absolute mismatch over near-zero coordinates.
    pub worst_absolute: f64,
    /// Whether every probed coordinate met its tolerance.
    pub passed: bool,
}

/// Compares the analytic batch gradient with a two-sided finite
/// difference of the batch loss at `points` randomly chosen parameter
/// coordinates (all coordinates when `points` exceeds the parameter
/// count).  Coordinates whose derivative magnitude is below `1e-6` are
/// held to an absolute tolerance instead of a relative one.
pub fn gradient_audit(
    predictor: &LearnedPredictor,
    batch: &[TrainingItem],
    points: usize,
    seed: u64,
) -> Result<GradientAudit> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty audit batch".into()));
    }
    let (_, grad) = predictor.clone().loss_and_grad(batch)?;
    let total = grad.len();
    let coordinates: Vec<usize> = if points >= total {
        (0..total).collect()
    } else {
        let mut rng = rng::root(seed);
        let mut chosen = HashSet::new();
        while chosen.len() < points {
            chosen.insert(rng.random_range(0..total));
        }
        let mut sorted: Vec<usize> = chosen.into_iter().collect();
        sorted.sort_unstable();
        sorted
    };

    let mut probe = predictor.clone();
    let mut worst_relative = 0.0_f64;
    let mut worst_absolute = 0.0_f64;
    let mut passed = true;
    for &j in &coordinates {
        let original = probe.params()[j];
        probe.params_mut()[j] = original + AUDIT_FD_STEP;
        let (upper, _) = probe.loss_and_grad(batch)?;
        probe.params_mut()[j] = original - AUDIT_FD_STEP;
        let (lower, _) = probe.loss_and_grad(batch)?;
        probe.params_mut()[j] = original;

        let numeric = (upper - lower) / (2.0 * AUDIT_FD_STEP);
        let gap = (grad[j] - numeric).abs();
        let scale = grad[j].abs().max(numeric.abs());
        if scale > AUDIT_SCALE_FLOOR {
            worst_relative = worst_relative.max(gap / scale);
            passed &= gap / scale < AUDIT_RELATIVE_TOLERANCE;
        } else {
            worst_absolute = worst_absolute.max(gap);
            passed &= gap < AUDIT_ABSOLUTE_TOLERANCE;
        }
    }
    Ok(GradientAudit {
        coordinates,
        worst_relative,
        worst_absolute,
        passed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{draw_training_sequences, TrainingSource};
    use crate::oracle::ExplicitCategorical;
    use crate::predictor::ConditionalPredictor;
    use crate::types::MaskedSequence;

    fn atom(tokens: &[u16]) -> Sequence {
        Sequence::new(tokens.to_vec(), 3).unwrap()
    }

    /// Mean of each disjoint window of `width` losses.
    fn window_means(losses: &[f64], width: usize) -> Vec<f64> {
        losses
            .chunks_exact(width)
            .map(|w| w.iter().sum::<f64>() / width as f64)
            .collect()
    }

    /// Conditional over tokens at `position` when everything is masked.
    fn masked_conditional(predictor: &LearnedPredictor, len: usize, position: usize) -> Vec<f64> {
        let masked = MaskedSequence::fully_masked(len, 3).unwrap();
        let rows = predictor.predict(&masked).unwrap();
        rows.into_iter()
            .find(|(i, _)| *i == position)
            .map(|(_, c)| c)
            .expect("position is masked")
    }

    fn quick_config(steps: usize) -> TrainConfig {
        TrainConfig {
            steps,
            batch_size: 32,
            learning_rate: 0.3,
            momentum: 0.9,
            warmup_steps: 20,
            lambda_strata: 4,
            lambda_floor: 1e-3,
            seed: 11,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn config_validation_rejects_bad_ranges() {
        let cases = [
            TrainConfig {
                steps: 0,
                ..TrainConfig::default()
            },
            TrainConfig {
                momentum: 1.0,
                ..TrainConfig::default()
            },
            TrainConfig {
                warmup_steps: 30_000,
                ..TrainConfig::default()
            },
            TrainConfig {
                lambda_strata: 0,
                ..TrainConfig::default()
            },
            TrainConfig {
                lambda_strata: 1024,
                ..TrainConfig::default()
            },
            TrainConfig {
                lambda_floor: 0.7,
                ..TrainConfig::default()
            },
            TrainConfig {
                learning_rate: f64::NAN,
                ..TrainConfig::default()
            },
            TrainConfig {
                inverse_lambda_weight: true,
                lambda_floor: 0.0,
                ..TrainConfig::default()
            },
        ];
        for cfg in cases {
            assert!(cfg.validate().is_err(), "accepted {cfg:?}");
        }
        TrainConfig::default().validate().unwrap();
    }

    #[test]
    fn learning_rate_warms_up_then_decays() {
        let cfg = TrainConfig {
            steps: 1000,
            warmup_steps: 100,
            learning_rate: 0.2,
            ..TrainConfig::default()
        };
        assert!(learning_rate_at(&cfg, 0) < 0.003);
        assert!((learning_rate_at(&cfg, 99) - 0.2).abs() < 1e-12);
        for step in 100..999 {
            assert!(learning_rate_at(&cfg, step + 1) <= learning_rate_at(&cfg, step));
        }
        assert!(learning_rate_at(&cfg, 999) < 0.002);
    }

    #[test]
    fn single_atom_training_concentrates() {
        let x0 = atom(&[0, 1, 2, 0]);
        let data = TrainingSet::Empirical(vec![x0.clone()]);
        let predictor = LearnedPredictor::new_mixture(3, 4, 2, 1).unwrap();
        let cfg = quick_config(400);
        let outcome = train_dce(predictor, &data, &cfg, None, None).unwrap();

        for position in 0..4 {
            let conditional = masked_conditional(&outcome.predictor, 4, position);
            let target = x0.tokens()[position] as usize;
            assert!(
                conditional[target] >= 0.99,
                "position {position} gives {conditional:?}"
            );
        }
        let tail = window_means(&outcome.losses, 100);
        assert!(
            *tail.last().unwrap() < 0.02,
            "final smoothed loss {:?}",
            tail.last()
        );
    }

    #[test]
    fn independent_token_data_learns_the_marginals() {
        let marginals = vec![
            vec![0.6, 0.3, 0.1],
            vec![0.2, 0.5, 0.3],
            vec![0.25, 0.25, 0.5],
        ];
        let product = ExplicitCategorical::from_independent_marginals(&marginals).unwrap();
        let sample = draw_training_sequences(&TrainingSource::CategoricalAtoms(&product), 4000, 5)
            .unwrap();
        let data = TrainingSet::Empirical(sample);
        let predictor = LearnedPredictor::new_mixture(3, 3, 4, 2).unwrap();
        let cfg = TrainConfig {
            batch_size: 64,
            ..quick_config(1500)
        };
        let outcome = train_dce(predictor, &data, &cfg, None, None).unwrap();

        for (position, truth) in marginals.iter().enumerate() {
            let learned = masked_conditional(&outcome.predictor, 3, position);
            let tv = 0.5
                * learned
                    .iter()
                    .zip(truth)
                    .map(|(a, b)| (a - b).abs())
                    .sum::<f64>();
            assert!(tv <= 0.02, "position {position}: TV {tv} for {learned:?}");
        }
    }

    #[test]
    fn smoothed_loss_is_monotone_on_toy_data() {
        let spec = crate::datagen::ToyCategoricalSpec {
            n_atoms: 8,
            len: 4,
            alphabet: "ATG".into(),
            temperature: 0.5,
            seed: 3,
        };
        let toy = crate::datagen::build_toy_categorical(&spec).unwrap();
        let sample =
            draw_training_sequences(&TrainingSource::CategoricalAtoms(&toy.distribution), 2000, 9)
                .unwrap();
        let data = TrainingSet::Empirical(sample);
        let predictor = LearnedPredictor::new_mixture(3, 4, 8, 4).unwrap();
        let cfg = TrainConfig {
            batch_size: 64,
            ..quick_config(1200)
        };
        let outcome = train_dce(predictor, &data, &cfg, None, None).unwrap();

        let smoothed = window_means(&outcome.losses, 100);
        for pair in smoothed.windows(2) {
            assert!(
                pair[1] <= pair[0] * 1.05 + 1e-9,
                "smoothed loss rose: {smoothed:?}"
            );
        }
    }

    #[test]
    fn balanced_sampling_equalizes_exposure_without_changing_the_objective() {
        let a = atom(&[0, 1, 2]);
        let b = atom(&[0, 1, 0]);
        let data = TrainingSet::Weighted(vec![(a.clone(), 0.999), (b.clone(), 0.001)]);

        // Exposure: the rare atom fills about half of every batch, and its
        // items carry the compensating importance weight 2·0.001.
        let balanced_cfg = TrainConfig {
            balanced_sampling: true,
            batch_size: 400,
            ..quick_config(800)
        };
        let picker = AtomPicker::build(&data, true);
        let batch = draw_batch(&balanced_cfg, &picker, 0).unwrap();
        let rare: Vec<&TrainingItem> = batch
            .iter()
            .filter(|item| item.clean.tokens() == b.tokens())
            .collect();
        assert!(
            (150..=250).contains(&rare.len()),
            "rare atom filled {} of 400 slots",
            rare.len()
        );
        for item in &rare {
            assert!((item.weight - 2.0 * 0.001).abs() < 1e-12);
        }
        let dominant_weight = batch
            .iter()
            .find(|item| item.clean.tokens() == a.tokens())
            .map(|item| item.weight)
            .unwrap();
        assert!((dominant_weight - 2.0 * 0.999).abs() < 1e-12);

        // Objective: both sampling schemes still favor the dominant branch.
        for balanced in [true, false] {
            let cfg = TrainConfig {
                balanced_sampling: balanced,
                ..quick_config(800)
            };
            let outcome = train_dce(
                LearnedPredictor::new_mixture(3, 3, 2, 7).unwrap(),
                &data,
                &cfg,
                None,
                None,
            )
            .unwrap();
            let conditional = masked_conditional(&outcome.predictor, 3, 2);
            assert!(
                conditional[2] >= 0.9,
                "balanced={balanced} run puts only {} on the dominant branch",
                conditional[2]
            );
        }
    }

    #[test]
    fn inverse_lambda_weighting_still_learns() {
        let x0 = atom(&[2, 0, 1, 2]);
        let data = TrainingSet::Empirical(vec![x0.clone()]);
        let cfg = TrainConfig {
            inverse_lambda_weight: true,
            lambda_floor: 0.05,
            ..quick_config(400)
        };
        let predictor = LearnedPredictor::new_mixture(3, 4, 2, 13).unwrap();
        let outcome = train_dce(predictor, &data, &cfg, None, None).unwrap();
        assert!(outcome.losses.iter().all(|l| l.is_finite()));
        let conditional = masked_conditional(&outcome.predictor, 4, 0);
        assert!(conditional[2] >= 0.9, "learned {conditional:?}");
    }

    #[test]
    fn training_is_deterministic() {
        let data = TrainingSet::Empirical(vec![atom(&[0, 1, 2]), atom(&[2, 2, 0])]);
        let cfg = quick_config(150);
        let run = |seed| {
            let predictor = LearnedPredictor::new_mixture(3, 3, 3, seed).unwrap();
            train_dce(predictor, &data, &cfg, None, None).unwrap()
        };
        let first = run(21);
        let second = run(21);
        assert_eq!(first.predictor.params(), second.predictor.params());
        assert_eq!(first.losses, second.losses);
        assert_eq!(first.resume, second.resume);
    }

    #[test]
    fn resume_reproduces_the_uninterrupted_run() {
        let data = TrainingSet::Empirical(vec![atom(&[0, 1, 2]), atom(&[1, 1, 0])]);
        let cfg = TrainConfig {
            checkpoint_interval: 60,
            ..quick_config(120)
        };

        let mut snapshot = None;
        let mut capture = |step: usize, predictor: &LearnedPredictor, state: &ResumeState| {
            if step == 60 {
                snapshot = Some((predictor.clone(), state.clone()));
            }
            Ok(())
        };
        let full = train_dce(
            LearnedPredictor::new_mixture(3, 3, 3, 4).unwrap(),
            &data,
            &cfg,
            None,
            Some(&mut capture),
        )
        .unwrap();

        let (predictor, state) = snapshot.expect("checkpoint at step 60");
        let rest = train_dce(predictor, &data, &cfg, Some(state), None).unwrap();

        assert_eq!(full.predictor.params(), rest.predictor.params());
        assert_eq!(full.losses[60..], rest.losses);
        assert_eq!(full.resume, rest.resume);
    }

    #[test]
    fn checkpoint_callback_fires_on_schedule() {
        let data = TrainingSet::Empirical(vec![atom(&[0, 1, 2])]);
        let cfg = TrainConfig {
            checkpoint_interval: 25,
            ..quick_config(100)
        };
        let mut seen = Vec::new();
        let mut callback = |step: usize, _: &LearnedPredictor, state: &ResumeState| {
            assert_eq!(state.next_step, step);
            seen.push(step);
            Ok(())
        };
        train_dce(
            LearnedPredictor::new_mixture(3, 3, 2, 1).unwrap(),
            &data,
            &cfg,
            None,
            Some(&mut callback),
        )
        .unwrap();
        assert_eq!(seen, vec![25, 50, 75, 100]);
    }

    #[test]
    fn non_finite_loss_aborts_with_divergence() {
        let data = TrainingSet::Empirical(vec![atom(&[0, 1, 2])]);
        let mut predictor = LearnedPredictor::new_mixture(3, 3, 2, 1).unwrap();
        predictor.params_mut()[0] = f64::NAN;
        let err = train_dce(predictor, &data, &quick_config(50), None, None).unwrap_err();
        assert!(matches!(err, Error::Diverged { step: 0, .. }), "{err}");
    }

    #[test]
    fn resume_state_roundtrips_through_disk() {
        let state = ResumeState {
            velocity: vec![0.25, -1.5, 3e-9, 0.0],
            next_step: 4242,
        };
        let dir = std::env::temp_dir().join(format!("maskdiff-train-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("state.bin");
        state.save(&path).unwrap();
        let loaded = ResumeState::load(&path).unwrap();
        assert_eq!(state, loaded);

        let mut bytes = std::fs::read(&path).unwrap();
        let last = bytes.len() - 1;
        bytes[last] ^= 0xff;
        bytes.pop();
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            ResumeState::load(&path),
            Err(Error::Format(_))
        ));
        std::fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn gradient_audit_matches_finite_differences() {
        let data = TrainingSet::Empirical(vec![atom(&[0, 1, 2]), atom(&[2, 0, 1])]);
        let picker = AtomPicker::build(&data, false);
        let cfg = quick_config(10);
        let batch = draw_batch(&cfg, &picker, 0).unwrap();

        for predictor in [
            LearnedPredictor::new_mixture(3, 3, 3, 5).unwrap(),
            LearnedPredictor::new_mlp(3, 3, 4, 6, 5).unwrap(),
        ] {
            let audit = gradient_audit(&predictor, &batch, 20, 99).unwrap();
            assert_eq!(audit.coordinates.len(), 20.min(predictor.params().len()));
            assert!(
                audit.passed,
                "worst relative {} absolute {}",
                audit.worst_relative, audit.worst_absolute
            );
        }
    }
}
