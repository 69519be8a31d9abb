//! One module per subcommand plus the plumbing they share: dataset and
//! predictor instantiation from config specs, oracle truth lookups, and
//! deterministic per-target seed derivation.

pub mod audit;
pub mod estimate;
pub mod gendata;
pub mod train;
pub mod variance;
pub mod verify;

use std::path::{Path, PathBuf};

use maskdiff::datagen::{
    build_markov, build_toy_categorical, read_sequence_file, MarkovCorpus, ToyCategorical,
    TrainingSource,
};
use maskdiff::oracle::OracleDistribution;
use maskdiff::predictor::{ConditionalPredictor, LearnedPredictor, OraclePredictor};
use maskdiff::{apply_mask, Alphabet, Error, IndexSet, Result, Sequence};

use crate::config::{DatasetSpec, PredictorSpec, SequenceSelection};

/// Wraps failures caused by config-declared inputs as config errors so
/// they exit with code 3; enumeration caps keep their own exit code.
pub fn config_stage<T>(result: Result<T>, what: &str) -> Result<T> {
    result.map_err(|e| match e {
        Error::CapExceeded { .. } => e,
        other => Error::Config(format!("{what}: {other}")),
    })
}

/// A dataset spec realized in memory.
pub enum Dataset {
    Toy {
        data: ToyCategorical,
        alphabet: Alphabet,
    },
    Markov {
        data: MarkovCorpus,
        window: usize,
        alphabet: Alphabet,
    },
}

impl Dataset {
    pub fn build(spec: &DatasetSpec) -> Result<Self> {
        match spec {
            DatasetSpec::Toy(s) => Ok(Self::Toy {
                data: build_toy_categorical(s)?,
                alphabet: Alphabet::new(&s.alphabet)?,
            }),
            DatasetSpec::Markov(s) => Ok(Self::Markov {
                data: build_markov(s)?,
                window: s.window,
                alphabet: Alphabet::new(&s.alphabet)?,
            }),
        }
    }

    pub fn alphabet(&self) -> &Alphabet {
        match self {
            Self::Toy { alphabet, .. } | Self::Markov { alphabet, .. } => alphabet,
        }
    }

    /// Length of every sequence this dataset produces.
    pub fn sequence_len(&self) -> usize {
        match self {
            Self::Toy { data, .. } => data.distribution.len(),
            Self::Markov { window, .. } => *window,
        }
    }

    /// Exact distribution the dataset draws from.
    pub fn oracle(&self) -> Result<OracleDistribution> {
        match self {
            Self::Toy { data, .. } => Ok(OracleDistribution::Categorical(data.distribution.clone())),
            Self::Markov { data, window, .. } => {
                OracleDistribution::markov_window(data.model.clone(), *window)
            }
        }
    }

    /// Sampling source for training-set draws.
    pub fn training_source(&self) -> TrainingSource<'_> {
        match self {
            Self::Toy { data, .. } => TrainingSource::CategoricalAtoms(&data.distribution),
            Self::Markov { data, window, .. } => TrainingSource::MarkovWindows {
                corpus: &data.corpus,
                alphabet_size: data.model.alphabet_size(),
                window: *window,
            },
        }
    }

    /// Resolves a sequence selection against this dataset.
    pub fn select_sequences(&self, selection: &SequenceSelection) -> Result<Vec<Sequence>> {
        match selection {
            SequenceSelection::AllAtoms => match self {
                Self::Toy { data, .. } => Ok(data
                    .distribution
                    .support()
                    .iter()
                    .map(|(x, _)| x.clone())
                    .collect()),
                Self::Markov { .. } => Err(Error::Config(
                    "all-atoms selection needs an enumerable toy dataset".into(),
                )),
            },
            SequenceSelection::Sample(s) => {
                maskdiff::datagen::draw_training_sequences(&self.training_source(), s.n, s.seed)
            }
            SequenceSelection::File(f) => {
                config_stage(read_sequence_file(&f.path, self.alphabet()), "sequence file")
            }
        }
    }
}

/// A conditional predictor realized from its config spec.
pub enum PredictorHandle {
    Oracle(OraclePredictor),
    Learned(LearnedPredictor),
}

impl PredictorHandle {
    pub fn build(spec: &PredictorSpec, dataset: &Dataset) -> Result<Self> {
        match spec {
            PredictorSpec::Oracle => Ok(Self::Oracle(OraclePredictor::new(dataset.oracle()?))),
            PredictorSpec::Checkpoint(c) => {
                let learned = config_stage(LearnedPredictor::load(&c.path), "checkpoint")?;
                if learned.alphabet_size() != dataset.alphabet().len()
                    || learned.len() != dataset.sequence_len()
                {
                    return Err(Error::Config(format!(
                        "checkpoint shape (N={}, L={}) does not match the dataset (N={}, L={})",
                        learned.alphabet_size(),
                        learned.len(),
                        dataset.alphabet().len(),
                        dataset.sequence_len()
                    )));
                }
                Ok(Self::Learned(learned))
            }
        }
    }

    pub fn conditional(&self) -> &dyn ConditionalPredictor {
        match self {
            Self::Oracle(p) => p,
            Self::Learned(p) => p,
        }
    }
}

/// Exact `−log p₀(x)`; `None` when `x` has probability zero.
pub fn truth_nll(oracle: &OracleDistribution, x: &Sequence) -> Result<Option<f64>> {
    Ok(oracle.log_prob(x)?.finite().map(|lp| -lp))
}

/// Exact `−log p₀(x^{suffix} | x^{prefix})`; `None` off support.
pub fn truth_conditional_nll(
    oracle: &OracleDistribution,
    x: &Sequence,
    prefix_len: usize,
) -> Result<Option<f64>> {
    let Some(full) = oracle.log_prob(x)?.finite() else {
        return Ok(None);
    };
    let keep = IndexSet::from_sorted((0..prefix_len).collect(), x.len())?;
    let prefix_lp = oracle.log_marginal_unmasked(&apply_mask(x, &keep)?)?;
    Ok(Some(prefix_lp - full))
}

/// Splits `0..len` into an estimated suffix `I₁` and an observed prefix
/// `I₂` of the given length.
pub fn prefix_split(len: usize, prefix_len: usize) -> Result<(IndexSet, IndexSet)> {
    if prefix_len == 0 || prefix_len >= len {
        return Err(Error::Config(format!(
            "prefix length {prefix_len} must lie in 1..{len}"
        )));
    }
    let i2 = IndexSet::from_sorted((0..prefix_len).collect(), len)?;
    let i1 = IndexSet::from_sorted((prefix_len..len).collect(), len)?;
    Ok((i1, i2))
}

/// Well-spread deterministic seed for the `index`-th target of a run.
pub fn target_seed(base: u64, index: usize) -> u64 {
    base.wrapping_add((index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// `<dir>/<base>-step<k>.<ext>` for periodic checkpoints.
pub fn step_path(dir: &Path, base: &str, step: usize, ext: &str) -> PathBuf {
    dir.join(format!("{base}-step{step}.{ext}"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{SampleSpec, CheckpointSpec};
    use maskdiff::datagen::ToyCategoricalSpec;

    fn toy_dataset() -> Dataset {
        let spec = DatasetSpec::Toy(ToyCategoricalSpec {
            n_atoms: 6,
            len: 4,
            alphabet: "ATG".into(),
            temperature: 0.5,
            seed: 2,
        });
        Dataset::build(&spec).unwrap()
    }

    #[test]
    fn toy_dataset_exposes_consistent_shapes() {
        let dataset = toy_dataset();
        assert_eq!(dataset.sequence_len(), 4);
        assert_eq!(dataset.alphabet().len(), 3);
        let atoms = dataset.select_sequences(&SequenceSelection::AllAtoms).unwrap();
        assert_eq!(atoms.len(), 6);
        let sample = dataset
            .select_sequences(&SequenceSelection::Sample(SampleSpec { n: 10, seed: 1 }))
            .unwrap();
        assert_eq!(sample.len(), 10);
        assert!(sample.iter().all(|x| x.len() == 4));
    }

    #[test]
    fn conditional_truth_matches_the_chain_rule() {
        let dataset = toy_dataset();
        let oracle = dataset.oracle().unwrap();
        let atoms = dataset.select_sequences(&SequenceSelection::AllAtoms).unwrap();
        let x = &atoms[0];
        let full = truth_nll(&oracle, x).unwrap().unwrap();
        let cond = truth_conditional_nll(&oracle, x, 2).unwrap().unwrap();
        let keep = IndexSet::from_sorted(vec![0, 1], 4).unwrap();
        let prefix_lp = oracle
            .log_marginal_unmasked(&apply_mask(x, &keep).unwrap())
            .unwrap();
        assert!((cond - (full + prefix_lp)).abs() < 1e-12);
        assert!(cond <= full + 1e-12);
    }

    #[test]
    fn missing_checkpoint_is_a_config_error() {
        let dataset = toy_dataset();
        let spec = PredictorSpec::Checkpoint(CheckpointSpec {
            path: PathBuf::from("/nonexistent.ckpt"),
        });
        let err = PredictorHandle::build(&spec, &dataset)
            .err()
            .expect("missing checkpoint must fail");
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn prefix_split_partitions_every_position() {
        let (i1, i2) = prefix_split(6, 2).unwrap();
        assert_eq!(i2.indices(), vec![0, 1]);
        assert_eq!(i1.indices(), vec![2, 3, 4, 5]);
        assert!(prefix_split(6, 0).is_err());
        assert!(prefix_split(6, 6).is_err());
    }

    #[test]
    fn target_seeds_are_distinct() {
        let seeds: std::collections::HashSet<u64> =
            (0..1000).map(|i| target_seed(42, i)).collect();
        assert_eq!(seeds.len(), 1000);
    }
}
