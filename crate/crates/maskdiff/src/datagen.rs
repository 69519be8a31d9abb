//! Synthetic dataset construction: the softmax-categorical toy
//! distribution over short sequences and the k-th order Markov corpus,
//! plus plain-text training-set files with checksummed manifests.
//!
//! All randomness comes from fixed-purpose ChaCha8 streams keyed by
//! `(seed, purpose)` — see [`crate::rng::substream`] — so every artifact
//! is byte-identical across runs and platforms, and adding a new purpose
//! never perturbs existing ones. Purposes: 0 atom draws, 1 atom scores,
//! 2 transition scores, 3 corpus walk, 4 training-set draws.
//!
//! Generation is single-threaded per dataset: the RNG sequence *is* the
//! artifact definition.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numerics::KahanSum;
use crate::oracle::{ExplicitCategorical, MarkovChainModel};
use crate::rng::substream;
use crate::types::{Alphabet, Sequence};

const STREAM_ATOM_DRAW: u64 = 0;
const STREAM_ATOM_SCORES: u64 = 1;
const STREAM_TRANSITION_SCORES: u64 = 2;
const STREAM_CORPUS_WALK: u64 = 3;
const STREAM_TRAINING_DRAWS: u64 = 4;

/// Version tag written into dataset manifests.
pub const MANIFEST_SCHEMA_VERSION: u32 = 1;

fn default_n_atoms() -> usize {
    128
}
fn default_atom_len() -> usize {
    8
}
fn default_alphabet() -> String {
    "ATGC".into()
}
fn default_temperature() -> f64 {
    0.5
}
fn default_order() -> usize {
    4
}
fn default_corpus_len() -> usize {
    100_000
}
fn default_window() -> usize {
    32
}

/// Softmax-categorical toy distribution: `n_atoms` distinct sequences of
/// length `len`, with probabilities `softmax(score / temperature)` over
/// uniform `[0, 1)` scores.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToyCategoricalSpec {
    #[serde(default = "default_n_atoms")]
    pub n_atoms: usize,
    #[serde(default = "default_atom_len")]
    pub len: usize,
    #[serde(default = "default_alphabet")]
    pub alphabet: String,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default)]
    pub seed: u64,
}

impl Default for ToyCategoricalSpec {
    fn default() -> Self {
        Self {
            n_atoms: default_n_atoms(),
            len: default_atom_len(),
            alphabet: default_alphabet(),
            temperature: default_temperature(),
            seed: 0,
        }
    }
}

/// k-th order Markov chain with softmax transition rows, plus one long
/// ancestral corpus realization that training windows are cut from.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MarkovCorpusSpec {
    #[serde(default = "default_order")]
    pub order: usize,
    /// Kept desk-scale by default; the full-length corpus is opt-in.
    #[serde(default = "default_corpus_len")]
    pub corpus_len: usize,
    #[serde(default = "default_window")]
    pub window: usize,
    #[serde(default = "default_alphabet")]
    pub alphabet: String,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default)]
    pub seed: u64,
}

impl Default for MarkovCorpusSpec {
    fn default() -> Self {
        Self {
            order: default_order(),
            corpus_len: default_corpus_len(),
            window: default_window(),
            alphabet: default_alphabet(),
            temperature: default_temperature(),
            seed: 0,
        }
    }
}

/// Output of [`build_toy_categorical`]: the distribution plus the raw
/// scores (aligned with `distribution.support()` order) so the softmax
/// can be recomputed and audited independently.
#[derive(Debug, Clone)]
pub struct ToyCategorical {
    pub distribution: ExplicitCategorical,
    pub scores: Vec<f64>,
}

/// Output of [`build_markov`]: the model (stationary initial k-gram
/// distribution, matching windows cut far from the corpus start) and the
/// ancestral corpus realization.
#[derive(Debug, Clone)]
pub struct MarkovCorpus {
    pub model: MarkovChainModel,
    pub corpus: Vec<u16>,
}

fn softmax(scores: &[f64], temperature: f64) -> Vec<f64> {
    let top = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = scores.iter().map(|s| ((s - top) / temperature).exp()).collect();
    let total = {
        let mut acc = KahanSum::new();
        for &w in &weights {
            acc.add(w);
        }
        acc.value()
    };
    weights.into_iter().map(|w| w / total).collect()
}

/// Draws `n_atoms` distinct uniform sequences, scores them uniformly on
/// `[0, 1)`, and normalizes `exp(score / temperature)`. Deterministic in
/// `spec.seed`.
pub fn build_toy_categorical(spec: &ToyCategoricalSpec) -> Result<ToyCategorical> {
    let alphabet = Alphabet::new(&spec.alphabet)?;
    let n = alphabet.len();
    if spec.len == 0 {
        return Err(Error::InvalidArgument("atom length must be positive".into()));
    }
    if spec.n_atoms == 0 {
        return Err(Error::InvalidArgument("need at least one atom".into()));
    }
    if !(spec.temperature > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "temperature must be positive, got {}",
            spec.temperature
        )));
    }
    let states = u128::from(n)
        .checked_pow(spec.len as u32)
        .unwrap_or(u128::MAX);
    if u128::try_from(spec.n_atoms).unwrap() > states {
        return Err(Error::InvalidArgument(format!(
            "{} distinct atoms requested but only {states} sequences of length {} exist",
            spec.n_atoms, spec.len
        )));
    }

    let mut draw_rng = substream(spec.seed, STREAM_ATOM_DRAW);
    let atoms: Vec<Sequence> = if u128::try_from(spec.n_atoms).unwrap() * 2 >= states {
        // Dense request: enumerate the whole space and take a random
        // prefix of a Fisher–Yates shuffle, avoiding rejection stalls.
        let mut all: Vec<Vec<u16>> = Vec::with_capacity(states as usize);
        let mut tokens = vec![0u16; spec.len];
        loop {
            all.push(tokens.clone());
            let mut pos = spec.len;
            loop {
                if pos == 0 {
                    break;
                }
                pos -= 1;
                tokens[pos] += 1;
                if tokens[pos] < n {
                    break;
                }
                tokens[pos] = 0;
            }
            if tokens.iter().all(|&t| t == 0) {
                break;
            }
        }
        for i in 0..spec.n_atoms {
            let j = draw_rng.random_range(i..all.len());
            all.swap(i, j);
        }
        all.truncate(spec.n_atoms);
        all.into_iter()
            .map(|t| Sequence::new(t, n))
            .collect::<Result<_>>()?
    } else {
        let mut seen = HashSet::with_capacity(spec.n_atoms);
        let mut atoms = Vec::with_capacity(spec.n_atoms);
        while atoms.len() < spec.n_atoms {
            let tokens: Vec<u16> = (0..spec.len).map(|_| draw_rng.random_range(0..n)).collect();
            if seen.insert(tokens.clone()) {
                atoms.push(Sequence::new(tokens, n)?);
            }
        }
        atoms
    };

    let mut score_rng = substream(spec.seed, STREAM_ATOM_SCORES);
    let scores: Vec<f64> = (0..spec.n_atoms).map(|_| score_rng.random::<f64>()).collect();
    let probs = softmax(&scores, spec.temperature);
    let distribution = ExplicitCategorical::from_weights(atoms, probs)?;
    Ok(ToyCategorical {
        distribution,
        scores,
    })
}

/// Builds the transition table (softmax rows per context) and walks one
/// ancestral corpus from a uniform initial k-gram. Deterministic in
/// `spec.seed`.
pub fn build_markov(spec: &MarkovCorpusSpec) -> Result<MarkovCorpus> {
    let alphabet = Alphabet::new(&spec.alphabet)?;
    let n = alphabet.len();
    if spec.order >= spec.window {
        return Err(Error::InvalidArgument(format!(
            "order {} must be below the window length {}",
            spec.order, spec.window
        )));
    }
    if spec.corpus_len < spec.window {
        return Err(Error::InvalidArgument(format!(
            "corpus length {} shorter than one window {}",
            spec.corpus_len, spec.window
        )));
    }
    if !(spec.temperature > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "temperature must be positive, got {}",
            spec.temperature
        )));
    }
    let contexts = usize::from(n)
        .checked_pow(spec.order as u32)
        .ok_or_else(|| Error::InvalidArgument(format!("order {} overflows", spec.order)))?;

    let mut table_rng = substream(spec.seed, STREAM_TRANSITION_SCORES);
    let transitions: Vec<Vec<f64>> = (0..contexts)
        .map(|_| {
            let scores: Vec<f64> = (0..n).map(|_| table_rng.random::<f64>()).collect();
            softmax(&scores, spec.temperature)
        })
        .collect();
    let model = MarkovChainModel::with_stationary_initial(spec.order, n, transitions)?;

    let cdf_rows: Vec<Vec<f64>> = model
        .transitions()
        .iter()
        .map(|row| {
            let mut cdf = Vec::with_capacity(row.len());
            let mut acc = 0.0f64;
            for &p in row {
                acc += p;
                cdf.push(acc);
            }
            if let Some(last) = cdf.last_mut() {
                *last = 1.0;
            }
            cdf
        })
        .collect();

    let mut walk_rng = substream(spec.seed, STREAM_CORPUS_WALK);
    let mut corpus = Vec::with_capacity(spec.corpus_len);
    for _ in 0..spec.order.min(spec.corpus_len) {
        corpus.push(walk_rng.random_range(0..n));
    }
    let mut ctx = model.pack(&corpus[..spec.order.min(spec.corpus_len)]);
    while corpus.len() < spec.corpus_len {
        let u = walk_rng.random::<f64>();
        let next = cdf_rows[ctx].partition_point(|&c| c <= u) as u16;
        corpus.push(next.min(n - 1));
        ctx = model.shift(ctx, corpus[corpus.len() - 1]);
    }
    Ok(MarkovCorpus { model, corpus })
}

/// Where training sequences come from: i.i.d. atoms of an explicit
/// categorical, or fixed-length windows cut uniformly from a corpus.
pub enum TrainingSource<'a> {
    CategoricalAtoms(&'a ExplicitCategorical),
    MarkovWindows {
        corpus: &'a [u16],
        alphabet_size: u16,
        window: usize,
    },
}

/// Draws `n` training sequences from the source. Deterministic in `seed`
/// (purpose stream 4, independent of generation streams).
pub fn draw_training_sequences(source: &TrainingSource, n: usize, seed: u64) -> Result<Vec<Sequence>> {
    if n == 0 {
        return Err(Error::InvalidArgument("need at least one sequence".into()));
    }
    let mut rng = substream(seed, STREAM_TRAINING_DRAWS);
    match source {
        TrainingSource::CategoricalAtoms(d) => {
            let mut cdf = Vec::with_capacity(d.support().len());
            let mut acc = KahanSum::new();
            for (_, p) in d.support() {
                acc.add(*p);
                cdf.push(acc.value());
            }
            if let Some(last) = cdf.last_mut() {
                *last = 1.0;
            }
            Ok((0..n)
                .map(|_| {
                    let u = rng.random::<f64>();
                    let i = cdf.partition_point(|&c| c <= u).min(cdf.len() - 1);
                    d.support()[i].0.clone()
                })
                .collect())
        }
        TrainingSource::MarkovWindows {
            corpus,
            alphabet_size,
            window,
        } => {
            if *window == 0 || corpus.len() < *window {
                return Err(Error::InvalidArgument(format!(
                    "corpus of length {} cannot supply windows of length {window}",
                    corpus.len()
                )));
            }
            (0..n)
                .map(|_| {
                    let start = rng.random_range(0..=corpus.len() - window);
                    Sequence::new(corpus[start..start + window].to_vec(), *alphabet_size)
                })
                .collect()
        }
    }
}

/// Sidecar metadata written next to every dataset file.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub schema_version: u32,
    /// The generating spec (dataset- and draw-parameters), echoed as JSON.
    pub spec: serde_json::Value,
    pub seed: u64,
    pub n_sequences: usize,
    pub len: usize,
    pub alphabet: String,
    pub sha256: String,
}

/// `<data path>.manifest.json`.
pub fn manifest_path(data_path: &Path) -> PathBuf {
    let mut name = data_path.as_os_str().to_os_string();
    name.push(".manifest.json");
    PathBuf::from(name)
}

fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Writes sequences in the plain-text format (one rendered line each).
pub fn write_sequence_file(path: &Path, alphabet: &Alphabet, seqs: &[Sequence]) -> Result<()> {
    let mut text = String::with_capacity(seqs.len() * (seqs.first().map_or(0, Sequence::len) + 1));
    for x in seqs {
        text.push_str(&alphabet.render_sequence(x));
        text.push('\n');
    }
    fs::write(path, text)?;
    Ok(())
}

/// Reads a plain-text sequence file; every line must render in `alphabet`
/// and all sequences must share one length.
pub fn read_sequence_file(path: &Path, alphabet: &Alphabet) -> Result<Vec<Sequence>> {
    let text = fs::read_to_string(path)?;
    let seqs: Vec<Sequence> = text
        .lines()
        .map(|line| alphabet.parse_sequence(line))
        .collect::<Result<_>>()?;
    if seqs.is_empty() {
        return Err(Error::Format(format!("{} holds no sequences", path.display())));
    }
    if seqs.iter().any(|x| x.len() != seqs[0].len()) {
        return Err(Error::Format(format!(
            "{} mixes sequence lengths",
            path.display()
        )));
    }
    Ok(seqs)
}

/// Writes the data file plus its manifest sidecar; returns the manifest.
pub fn write_dataset(
    path: &Path,
    alphabet: &Alphabet,
    seqs: &[Sequence],
    spec: serde_json::Value,
    seed: u64,
) -> Result<DatasetManifest> {
    if seqs.is_empty() {
        return Err(Error::InvalidArgument("refusing to write an empty dataset".into()));
    }
    write_sequence_file(path, alphabet, seqs)?;
    let bytes = fs::read(path)?;
    let symbols: String = (0..alphabet.len())
        .map(|i| alphabet.symbol(i).expect("index within alphabet"))
        .collect();
    let manifest = DatasetManifest {
        schema_version: MANIFEST_SCHEMA_VERSION,
        spec,
        seed,
        n_sequences: seqs.len(),
        len: seqs[0].len(),
        alphabet: symbols,
        sha256: sha256_hex(&bytes),
    };
    fs::write(manifest_path(path), serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

/// Draws `n` sequences from the source and writes them with a manifest:
/// the one-call path behind the dataset-generation command.
pub fn draw_training_set(
    source: &TrainingSource,
    n: usize,
    seed: u64,
    alphabet: &Alphabet,
    spec: serde_json::Value,
    path: &Path,
) -> Result<DatasetManifest> {
    let seqs = draw_training_sequences(source, n, seed)?;
    write_dataset(path, alphabet, &seqs, spec, seed)
}

/// Re-reads a dataset, checking the manifest's checksum and shape against
/// the data file. Returns the manifest on success.
pub fn verify_dataset(path: &Path) -> Result<DatasetManifest> {
    let manifest: DatasetManifest =
        serde_json::from_str(&fs::read_to_string(manifest_path(path))?)?;
    if manifest.schema_version != MANIFEST_SCHEMA_VERSION {
        return Err(Error::Format(format!(
            "manifest schema version {} unsupported (expected {MANIFEST_SCHEMA_VERSION})",
            manifest.schema_version
        )));
    }
    let bytes = fs::read(path)?;
    let actual = sha256_hex(&bytes);
    if actual != manifest.sha256 {
        return Err(Error::Format(format!(
            "{} does not match its manifest checksum",
            path.display()
        )));
    }
    let alphabet = Alphabet::new(&manifest.alphabet)?;
    let seqs = read_sequence_file(path, &alphabet)?;
    if seqs.len() != manifest.n_sequences || seqs[0].len() != manifest.len {
        return Err(Error::Format(format!(
            "{} shape ({} × {}) does not match its manifest ({} × {})",
            path.display(),
            seqs.len(),
            seqs[0].len(),
            manifest.n_sequences,
            manifest.len
        )));
    }
    Ok(manifest)
}
