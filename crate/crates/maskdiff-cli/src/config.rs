//! JSON experiment configs: one struct per subcommand, schema-validated
//! up front, unknown keys rejected, every field defaulted so each
//! command also runs config-free.
//!
//! The hex SHA-256 of a config's compact JSON form (after the `--seed`
//! override is applied) identifies the run; reports embed it so replays
//! against the wrong config are detectable.

use std::path::{Path, PathBuf};

use maskdiff::datagen::{MarkovCorpusSpec, ToyCategoricalSpec};
use maskdiff::train::TrainConfig;
use maskdiff::{Error, Result};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Schema version every config must carry (or default to).
pub const CONFIG_SCHEMA_VERSION: u32 = 1;

/// Loads a config from `path`, or falls back to the command's defaults.
pub fn load<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    let Some(path) = path else {
        return Ok(T::default());
    };
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("read {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("parse {}: {e}", path.display())))
}

/// Hex SHA-256 of the compact JSON serialization.
pub fn hash<T: Serialize>(config: &T) -> Result<String> {
    let canonical = serde_json::to_string(config)
        .map_err(|e| Error::Config(format!("serialize config: {e}")))?;
    let digest = Sha256::digest(canonical.as_bytes());
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

fn check_schema_version(found: u32) -> Result<()> {
    if found != CONFIG_SCHEMA_VERSION {
        return Err(Error::Config(format!(
            "config schema version {found} is not supported (expected {CONFIG_SCHEMA_VERSION})"
        )));
    }
    Ok(())
}

/// Which synthetic distribution a command works on.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetSpec {
    /// Softmax-categorical over a fixed set of sequences.
    Toy(ToyCategoricalSpec),
    /// Windows of a higher-order Markov chain.
    Markov(MarkovCorpusSpec),
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self::Toy(ToyCategoricalSpec::default())
    }
}

/// Where a command's conditional predictor comes from.
#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum PredictorSpec {
    /// Exact conditionals from the dataset's oracle distribution.
    #[default]
    Oracle,
    /// A trained checkpoint on disk.
    Checkpoint(CheckpointSpec),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointSpec {
    pub path: PathBuf,
}

/// Architecture of a predictor to be trained from scratch.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrainPredictorSpec {
    Mixture(MixtureSpec),
    Mlp(MlpSpec),
}

impl Default for TrainPredictorSpec {
    fn default() -> Self {
        Self::Mixture(MixtureSpec::default())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MixtureSpec {
    pub components: usize,
    pub seed: u64,
    /// Initialize components from the first distinct training sequences.
    pub warm_start: bool,
    /// Concentration of the warm-started component conditionals.
    pub sharpening: f64,
}

impl Default for MixtureSpec {
    fn default() -> Self {
        Self {
            components: 192,
            seed: 0,
            warm_start: false,
            sharpening: 9.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MlpSpec {
    pub embed_dim: usize,
    pub hidden: usize,
    pub seed: u64,
}

impl Default for MlpSpec {
    fn default() -> Self {
        Self {
            embed_dim: 16,
            hidden: 64,
            seed: 0,
        }
    }
}

/// Which sequences an estimation run scores.
#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum SequenceSelection {
    /// Every sequence in the dataset's support (toy datasets only).
    #[default]
    AllAtoms,
    /// Draw from the dataset distribution.
    Sample(SampleSpec),
    /// Read a plain-text sequence file.
    File(FileSpec),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleSpec {
    pub n: usize,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileSpec {
    pub path: PathBuf,
}

/// The likelihood estimators the `estimate` command can run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EstimatorKind {
    /// Deterministic weighted sum over all mask subsets (`2^L` calls).
    ExactSubsetSum,
    /// Subset-sampling Monte Carlo without a noise variable.
    TimeFree,
    /// Subset-size-stratified variant of the same estimator.
    TimeFreeStratified,
    /// Quadrature over noise levels with Monte Carlo masking per node.
    TimeIntegral,
    /// Single uniform noise-level draw with importance weight.
    LambdaImportance,
    /// Random-order autoregressive chain-rule sampling.
    AoAutoregressive,
}

impl EstimatorKind {
    /// Stable name used in reports and CSV rows.
    pub fn name(self) -> &'static str {
        match self {
            Self::ExactSubsetSum => "exact-subset-sum",
            Self::TimeFree => "time-free",
            Self::TimeFreeStratified => "time-free-stratified",
            Self::TimeIntegral => "time-integral",
            Self::LambdaImportance => "lambda-importance",
            Self::AoAutoregressive => "ao-autoregressive",
        }
    }
}

/// Scoring `x^{I₁}` given `x^{I₂}` instead of the full sequence: the
/// first `prefix_len` positions are observed, the rest are estimated.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConditionalSpec {
    pub prefix_len: usize,
}

/// Config for `verify-identities`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VerifyConfig {
    pub schema_version: u32,
    /// Distribution the identity suite runs on; must be small enough
    /// for exact enumeration.
    pub instance: DatasetSpec,
    /// Also run the uniform-kernel time-derivative check on its pinned
    /// small instance.
    pub uniform_side: bool,
    /// Constant forward-rate scale for the time-side checks.
    pub sigma: f64,
    /// Random perturbations per optimality check.
    pub n_perturbations: usize,
    /// Random (state, token) probes for the score-route agreement check.
    pub route_points: usize,
    /// Representative sequences the integral checks run on.
    pub check_atoms: usize,
    /// Deliberately corrupt the predictor so the cross-entropy
    /// optimality check must fail (negative test).
    pub corrupt_predictor: bool,
    pub seed: u64,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        Self {
            schema_version: CONFIG_SCHEMA_VERSION,
            instance: DatasetSpec::default(),
            uniform_side: true,
            sigma: 1.0,
            n_perturbations: 100,
            route_points: 20,
            check_atoms: 4,
            corrupt_predictor: false,
            seed: 17,
        }
    }
}

impl VerifyConfig {
    pub fn override_seed(&mut self, seed: u64) {
        self.seed = seed;
    }

    pub fn validate(&self) -> Result<()> {
        check_schema_version(self.schema_version)?;
        if !(self.sigma.is_finite() && self.sigma > 0.0) {
            return Err(Error::Config(format!("sigma {} must be positive", self.sigma)));
        }
        if self.n_perturbations == 0 || self.route_points == 0 || self.check_atoms == 0 {
            return Err(Error::Config(
                "perturbations, route points, and check atoms must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Config for `gen-data`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenDataConfig {
    pub schema_version: u32,
    pub dataset: DatasetSpec,
    pub n_sequences: usize,
    /// Output file name inside the run's output directory.
    pub file_name: String,
    /// Seed of the training-draw stream (dataset content is pinned by
    /// the dataset spec's own seed).
    pub seed: u64,
}

impl Default for GenDataConfig {
    fn default() -> Self {
        Self {
            schema_version: CONFIG_SCHEMA_VERSION,
            dataset: DatasetSpec::default(),
            n_sequences: 4096,
            file_name: "train.txt".into(),
            seed: 1,
        }
    }
}

impl GenDataConfig {
    pub fn override_seed(&mut self, seed: u64) {
        self.seed = seed;
    }

    pub fn validate(&self) -> Result<()> {
        check_schema_version(self.schema_version)?;
        if self.n_sequences == 0 {
            return Err(Error::Config("n_sequences must be positive".into()));
        }
        if self.file_name.is_empty() {
            return Err(Error::Config("file_name must be nonempty".into()));
        }
        Ok(())
    }
}

/// Paths to a checkpoint/optimizer-state pair to continue from.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResumeSpec {
    pub checkpoint: PathBuf,
    pub state: PathBuf,
}

/// Config for `train`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainCommandConfig {
    pub schema_version: u32,
    /// Sequence file to train on; relative paths resolve against the
    /// output directory (where `gen-data` writes).
    pub data: PathBuf,
    pub alphabet: String,
    pub predictor: TrainPredictorSpec,
    pub train: TrainConfig,
    /// Base name for `<name>.ckpt` / `<name>.state` outputs.
    pub checkpoint_name: String,
    pub resume: Option<ResumeSpec>,
}

impl Default for TrainCommandConfig {
    fn default() -> Self {
        Self {
            schema_version: CONFIG_SCHEMA_VERSION,
            data: PathBuf::from("train.txt"),
            alphabet: "ATGC".into(),
            predictor: TrainPredictorSpec::default(),
            train: TrainConfig::default(),
            checkpoint_name: "predictor".into(),
            resume: None,
        }
    }
}

impl TrainCommandConfig {
    pub fn override_seed(&mut self, seed: u64) {
        self.train.seed = seed;
    }

    pub fn validate(&self) -> Result<()> {
        check_schema_version(self.schema_version)?;
        if self.checkpoint_name.is_empty() {
            return Err(Error::Config("checkpoint_name must be nonempty".into()));
        }
        self.train
            .validate()
            .map_err(|e| Error::Config(e.to_string()))
    }
}

/// Config for `estimate`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EstimateConfig {
    pub schema_version: u32,
    pub dataset: DatasetSpec,
    pub predictor: PredictorSpec,
    pub estimator: EstimatorKind,
    pub sequences: SequenceSelection,
    /// Monte Carlo samples per sequence (ignored by the exact
    /// estimator).
    pub n_samples: usize,
    /// Lower truncation of the noise-level integral.
    pub eps: f64,
    /// Gauss–Legendre nodes per panel for the noise-level quadrature.
    pub quad_nodes: usize,
    /// Equal panels for the noise-level quadrature.
    pub quad_panels: usize,
    /// Masking draws per quadrature node.
    pub mc_per_node: usize,
    /// Score a suffix given a prefix instead of the full sequence.
    pub conditional: Option<ConditionalSpec>,
    pub seed: u64,
}

impl Default for EstimateConfig {
    fn default() -> Self {
        Self {
            schema_version: CONFIG_SCHEMA_VERSION,
            dataset: DatasetSpec::default(),
            predictor: PredictorSpec::default(),
            estimator: EstimatorKind::TimeFree,
            sequences: SequenceSelection::default(),
            n_samples: 4096,
            eps: 1e-4,
            quad_nodes: 16,
            quad_panels: 2,
            mc_per_node: 16,
            conditional: None,
            seed: 11,
        }
    }
}

impl EstimateConfig {
    pub fn override_seed(&mut self, seed: u64) {
        self.seed = seed;
    }

    pub fn validate(&self) -> Result<()> {
        check_schema_version(self.schema_version)?;
        if self.n_samples == 0 && self.estimator != EstimatorKind::ExactSubsetSum {
            return Err(Error::Config("n_samples must be positive".into()));
        }
        if self.estimator == EstimatorKind::TimeIntegral
            && (self.quad_nodes == 0 || self.quad_panels == 0 || self.mc_per_node == 0)
        {
            return Err(Error::Config(
                "time-integral estimation needs positive nodes, panels, and draws".into(),
            ));
        }
        if let Some(c) = &self.conditional {
            if c.prefix_len == 0 {
                return Err(Error::Config(
                    "conditional estimation needs a nonempty prefix".into(),
                ));
            }
        }
        Ok(())
    }
}

/// Config for `variance-study`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VarianceConfig {
    pub schema_version: u32,
    pub dataset: DatasetSpec,
    pub predictor: PredictorSpec,
    /// Predictor-call budgets for the full-likelihood comparison.
    pub budgets: Vec<usize>,
    /// Sequences drawn from the dataset for the full-likelihood study.
    pub n_sequences: usize,
    /// Independent estimates per (estimator, budget) cell.
    pub n_repeats: usize,
    /// Sample counts for the likelihood-ratio comparison.
    pub ratio_samples: Vec<usize>,
    /// Sequence pairs for the likelihood-ratio study.
    pub n_pairs: usize,
    /// Lower truncation of the noise-level integral baseline.
    pub eps: f64,
    pub seed: u64,
}

impl Default for VarianceConfig {
    fn default() -> Self {
        Self {
            schema_version: CONFIG_SCHEMA_VERSION,
            dataset: DatasetSpec::default(),
            predictor: PredictorSpec::default(),
            budgets: vec![128, 256, 512],
            n_sequences: 30,
            n_repeats: 15,
            ratio_samples: vec![5, 10, 15, 20],
            n_pairs: 20,
            eps: 1e-4,
            seed: 23,
        }
    }
}

impl VarianceConfig {
    pub fn override_seed(&mut self, seed: u64) {
        self.seed = seed;
    }

    pub fn validate(&self) -> Result<()> {
        check_schema_version(self.schema_version)?;
        if self.budgets.is_empty() && self.ratio_samples.is_empty() {
            return Err(Error::Config(
                "nothing to study: both budgets and ratio_samples are empty".into(),
            ));
        }
        if self.budgets.iter().chain(&self.ratio_samples).any(|&b| b < 2) {
            return Err(Error::Config(
                "variance needs at least 2 samples per estimate".into(),
            ));
        }
        if self.n_repeats < 2 {
            return Err(Error::Config("n_repeats must be at least 2".into()));
        }
        if !self.budgets.is_empty() && self.n_sequences == 0 {
            return Err(Error::Config("n_sequences must be positive".into()));
        }
        if !self.ratio_samples.is_empty() && self.n_pairs == 0 {
            return Err(Error::Config("n_pairs must be positive".into()));
        }
        Ok(())
    }
}

/// Config for `audit`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AuditConfig {
    pub schema_version: u32,
    /// Generator of the in-distribution prompts and true continuations.
    pub markov: MarkovCorpusSpec,
    /// Temperature of the independent continuation generator.
    pub mismatched_temperature: f64,
    /// Seed of the independent continuation generator (a different
    /// transition table, not just different draws).
    pub mismatched_seed: u64,
    /// Draw the "mismatched" group from the matched generator too, so
    /// the separation must vanish.
    pub null_case: bool,
    pub predictor: PredictorSpec,
    /// Number of scored prompt/continuation pairs per group.
    pub n_prompts: usize,
    /// Observed prefix length; the rest of the window is scored.
    pub prefix_len: usize,
    /// Monte Carlo samples per conditional likelihood.
    pub n_samples: usize,
    pub seed: u64,
}

impl Default for AuditConfig {
    fn default() -> Self {
        Self {
            schema_version: CONFIG_SCHEMA_VERSION,
            markov: MarkovCorpusSpec::default(),
            mismatched_temperature: 5.0,
            mismatched_seed: 999,
            null_case: false,
            predictor: PredictorSpec::default(),
            n_prompts: 64,
            prefix_len: 16,
            n_samples: 256,
            seed: 29,
        }
    }
}

impl AuditConfig {
    pub fn override_seed(&mut self, seed: u64) {
        self.seed = seed;
    }

    pub fn validate(&self) -> Result<()> {
        check_schema_version(self.schema_version)?;
        if self.n_prompts == 0 || self.n_samples == 0 {
            return Err(Error::Config("prompts and samples must be positive".into()));
        }
        if self.prefix_len == 0 || self.prefix_len >= self.markov.window {
            return Err(Error::Config(format!(
                "prefix length {} must lie in 1..window ({})",
                self.prefix_len, self.markov.window
            )));
        }
        if !(self.mismatched_temperature.is_finite() && self.mismatched_temperature > 0.0) {
            return Err(Error::Config(format!(
                "mismatched temperature {} must be positive",
                self.mismatched_temperature
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse<T: DeserializeOwned>(text: &str) -> serde_json::Result<T> {
        serde_json::from_str(text)
    }

    #[test]
    fn unknown_keys_are_rejected_everywhere() {
        let top: serde_json::Result<VerifyConfig> = parse(r#"{ "sigmaa": 2.0 }"#);
        assert!(top.is_err());
        let nested: serde_json::Result<GenDataConfig> =
            parse(r#"{ "dataset": { "toy": { "n_atoms": 4, "bogus": 1 } } }"#);
        assert!(nested.is_err());
        let variant: serde_json::Result<EstimateConfig> =
            parse(r#"{ "predictor": { "checkpoint": { "path": "x", "extra": 1 } } }"#);
        assert!(variant.is_err());
    }

    #[test]
    fn defaults_and_kebab_names_round_trip() {
        let cfg: EstimateConfig = parse(
            r#"{
                "estimator": "lambda-importance",
                "predictor": "oracle",
                "sequences": { "sample": { "n": 5, "seed": 3 } }
            }"#,
        )
        .unwrap();
        assert_eq!(cfg.estimator, EstimatorKind::LambdaImportance);
        assert_eq!(cfg.schema_version, CONFIG_SCHEMA_VERSION);
        cfg.validate().unwrap();

        let cfg: VerifyConfig = parse(r#"{}"#).unwrap();
        cfg.validate().unwrap();
        assert!(matches!(cfg.instance, DatasetSpec::Toy(_)));
    }

    #[test]
    fn schema_version_mismatch_is_a_config_error() {
        let cfg: VerifyConfig = parse(r#"{ "schema_version": 9 }"#).unwrap();
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn hash_tracks_content_not_identity() {
        let a = VerifyConfig::default();
        let mut b = VerifyConfig::default();
        assert_eq!(hash(&a).unwrap(), hash(&b).unwrap());
        b.override_seed(18);
        assert_ne!(hash(&a).unwrap(), hash(&b).unwrap());
        assert_eq!(hash(&a).unwrap().len(), 64);
    }

    #[test]
    fn missing_config_file_is_a_config_error() {
        let err = load::<VerifyConfig>(Some(Path::new("/nonexistent/config.json"))).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        let cfg: TrainCommandConfig = load(None).unwrap();
        cfg.validate().unwrap();
    }

    #[test]
    fn command_validators_catch_bad_ranges() {
        let mut estimate = EstimateConfig {
            n_samples: 0,
            ..EstimateConfig::default()
        };
        assert!(estimate.validate().is_err());
        estimate.estimator = EstimatorKind::ExactSubsetSum;
        estimate.validate().unwrap();

        let variance = VarianceConfig {
            n_repeats: 1,
            ..VarianceConfig::default()
        };
        assert!(variance.validate().is_err());

        let audit = AuditConfig {
            prefix_len: 40,
            ..AuditConfig::default()
        };
        assert!(audit.validate().is_err());
    }
}
