//! Monte Carlo and deterministic estimators of sequence log-likelihoods
//! and log-likelihood ratios under the masking forward process.
//!
//! The central identity: for a length-`L` sequence, the negative log
//! probability equals `H_L · E[Σ_{i∉I} −ln c*(mask(x₀, I))_{i,x₀ⁱ}]` where
//! `I` is a random proper subset of positions whose size `k` has
//! probability `1/((L−k)·H_L)` and is uniform given its size, and `c*` is
//! the true conditional over each masked position. Every estimator here
//! is a sampling scheme for that expectation (or a conditional or paired
//! variant of it), usable with the oracle predictor or a learned one.
//!
//! Determinism: each sample draws from its own counter-indexed RNG
//! substream, and reductions run in sample order, so results are
//! byte-identical for any worker count.

use crate::error::{Error, Result};
use crate::losses::PROBABILITY_FLOOR;
use crate::numerics::KahanSum;
use crate::predictor::ConditionalPredictor;
use crate::quadrature::QuadratureSpec;
use crate::rng::substream;
use crate::types::{apply_mask, IndexSet, MaskedSequence, Sequence};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::Serialize;

/// Longest sequence for which the exact weighted subset sum (2^L
/// predictor calls) is allowed.
pub const SUBSET_SUM_CAP: usize = 12;

/// Largest diffused-position count enumerable in exact integral mode.
pub const PATTERN_CAP: usize = crate::losses::EXPECTATION_PATTERN_CAP;

/// Minimum pilot samples per stratum for the self-allocating estimator.
const MIN_PILOT_PER_STRATUM: usize = 8;

/// `H_l = Σ_{j=1}^{l} 1/j`, accumulated smallest-first.
pub fn harmonic_number(l: usize) -> f64 {
    let mut sum = KahanSum::new();
    for j in (1..=l).rev() {
        sum.add(1.0 / j as f64);
    }
    sum.value()
}

fn binomial(l: usize, k: usize) -> f64 {
    if k > l {
        return 0.0;
    }
    let k = k.min(l - k);
    let mut out = 1.0f64;
    for j in 0..k {
        out = out * (l - j) as f64 / (j + 1) as f64;
    }
    out
}

/// Draws proper subsets `I ⊊ {0..L−1}` with the harmonic size law
/// `P(|I| = k) = 1/((L−k)·H_L)` and uniform membership given size.
#[derive(Debug, Clone)]
pub struct SubsetSampler {
    l: usize,
    harmonic: f64,
    size_cdf: Vec<f64>,
}

impl SubsetSampler {
    pub fn new(l: usize) -> Result<Self> {
        if l == 0 {
            return Err(Error::InvalidArgument(
                "subset sampler needs at least one position".into(),
            ));
        }
        let harmonic = harmonic_number(l);
        let mut size_cdf = Vec::with_capacity(l);
        let mut acc = KahanSum::new();
        for k in 0..l {
            acc.add(1.0 / ((l - k) as f64 * harmonic));
            size_cdf.push(acc.value());
        }
        let total = *size_cdf.last().expect("l >= 1");
        debug_assert!((total - 1.0).abs() <= 1e-12, "size law sums to {total}");
        // Pin the last step so inverse-CDF sampling can never fall off
        // the end of the table.
        *size_cdf.last_mut().expect("l >= 1") = 1.0;
        Ok(Self {
            l,
            harmonic,
            size_cdf,
        })
    }

    /// Number of positions `L`.
    pub fn positions(&self) -> usize {
        self.l
    }

    /// `H_L`, the estimator's overall scale factor.
    pub fn harmonic(&self) -> f64 {
        self.harmonic
    }

    /// `P(|I| = k)`.
    pub fn size_probability(&self, k: usize) -> f64 {
        if k >= self.l {
            0.0
        } else {
            1.0 / ((self.l - k) as f64 * self.harmonic)
        }
    }

    /// Probability of one specific subset of size `k` (the size law split
    /// uniformly over the `C(L,k)` subsets of that size).
    pub fn subset_probability(&self, k: usize) -> f64 {
        self.size_probability(k) / binomial(self.l, k)
    }

    /// Draws a subset size by inverse CDF.
    pub fn sample_size<G: Rng>(&self, rng: &mut G) -> usize {
        let u: f64 = rng.random();
        self.size_cdf.partition_point(|&c| c <= u)
    }

    /// Draws a full subset: size, then uniform membership.
    pub fn sample_subset<G: Rng>(&self, rng: &mut G) -> IndexSet {
        let k = self.sample_size(rng);
        let all: Vec<usize> = (0..self.l).collect();
        uniform_subset(rng, &all, k, self.l)
    }
}

/// Uniform `k`-subset of the given positions, by partial Fisher–Yates.
fn uniform_subset<G: Rng>(
    rng: &mut G,
    positions: &[usize],
    k: usize,
    len_bound: usize,
) -> IndexSet {
    debug_assert!(k <= positions.len());
    let mut pool: Vec<usize> = positions.to_vec();
    for j in 0..k {
        let pick = j + rng.random_range(0..pool.len() - j);
        pool.swap(j, pick);
    }
    pool.truncate(k);
    IndexSet::from_unsorted(pool, len_bound).expect("subset of valid positions")
}

/// Summary of a Monte Carlo (or deterministic) estimate.
#[derive(Debug, Clone, Serialize)]
pub struct EstimateResult {
    /// Estimate in nats.
    pub mean: f64,
    /// Per-sample estimator variance in nats² (zero for deterministic
    /// evaluations). For stratified or node-based schemes this is the
    /// effective value `n_samples · stderr²` so the standard-error
    /// relation below always holds.
    pub variance: f64,
    pub n_samples: usize,
    /// `sqrt(variance / n_samples)`.
    pub stderr: f64,
    pub seed: u64,
    /// Predictor probabilities clamped at the floor while scoring.
    pub clamp_count: usize,
    /// Samples whose conditioning event had zero probability; any such
    /// sample makes the estimate +∞.
    pub off_support_count: usize,
    /// For truncated noise-level integrals: first-order estimate
    /// (endpoint integrand × ε) of the omitted `[0, ε]` mass. Add it to
    /// `mean` for a bias-corrected total.
    pub truncation_bias_bound: Option<f64>,
}

#[derive(Debug, Clone, Default)]
struct SampleOutcome {
    value: f64,
    clamps: usize,
    off_support: bool,
}

impl EstimateResult {
    fn from_outcomes(outcomes: &[SampleOutcome], seed: u64) -> Self {
        let n = outcomes.len();
        let clamp_count = outcomes.iter().map(|o| o.clamps).sum();
        let off_support_count = outcomes.iter().filter(|o| o.off_support).count();
        if outcomes.iter().any(|o| !o.value.is_finite()) {
            return Self {
                mean: f64::INFINITY,
                variance: f64::INFINITY,
                n_samples: n,
                stderr: f64::INFINITY,
                seed,
                clamp_count,
                off_support_count,
                truncation_bias_bound: None,
            };
        }
        let mut total = KahanSum::new();
        for o in outcomes {
            total.add(o.value);
        }
        let mean = total.value() / n as f64;
        let mut ss = KahanSum::new();
        for o in outcomes {
            let d = o.value - mean;
            ss.add(d * d);
        }
        let variance = if n > 1 { ss.value() / (n - 1) as f64 } else { 0.0 };
        Self {
            mean,
            variance,
            n_samples: n,
            stderr: (variance / n as f64).sqrt(),
            seed,
            clamp_count,
            off_support_count,
            truncation_bias_bound: None,
        }
    }
}

/// Runs `f(0..n)` across up to `threads` workers into an index-ordered
/// buffer; output is identical for every worker count.
fn parallel_samples<F>(n: usize, threads: usize, f: F) -> Result<Vec<SampleOutcome>>
where
    F: Fn(usize) -> Result<SampleOutcome> + Sync,
{
    let mut out = vec![SampleOutcome::default(); n];
    let threads = threads.max(1).min(n.max(1));
    if threads == 1 {
        for (i, slot) in out.iter_mut().enumerate() {
            *slot = f(i)?;
        }
        return Ok(out);
    }
    let chunk = n.div_ceil(threads);
    let f_ref = &f;
    std::thread::scope(|scope| -> Result<()> {
        let mut handles = Vec::new();
        for (ci, slice) in out.chunks_mut(chunk).enumerate() {
            handles.push(scope.spawn(move || -> Result<()> {
                for (j, slot) in slice.iter_mut().enumerate() {
                    *slot = f_ref(ci * chunk + j)?;
                }
                Ok(())
            }));
        }
        for h in handles {
            h.join().expect("estimator worker panicked")?;
        }
        Ok(())
    })?;
    Ok(out)
}

/// Scores `Σ −ln c(state)_{i, truth_i}` over the masked positions passing
/// `scored`, flooring probabilities; a zero-probability conditioning
/// event becomes a +∞ outcome rather than an error.
fn neg_log_sum(
    truth: &Sequence,
    state: &MaskedSequence,
    scored: &dyn Fn(usize) -> bool,
    c: &dyn ConditionalPredictor,
) -> Result<SampleOutcome> {
    let rows = match c.log_predict(state) {
        Ok(rows) => rows,
        Err(Error::ZeroConditioningEvent { .. }) => {
            return Ok(SampleOutcome {
                value: f64::INFINITY,
                clamps: 0,
                off_support: true,
            })
        }
        Err(e) => return Err(e),
    };
    let floor = PROBABILITY_FLOOR.ln();
    let mut total = KahanSum::new();
    let mut clamps = 0usize;
    for (i, row) in rows {
        if !scored(i) {
            continue;
        }
        let mut lp = row[usize::from(truth.token(i))];
        if lp < floor {
            lp = floor;
            clamps += 1;
        }
        total.add(-lp);
    }
    Ok(SampleOutcome {
        value: total.value(),
        clamps,
        off_support: false,
    })
}

/// What to do with positions outside `I₁ ∪ I₂` in conditional estimators.
///
/// Masking them lets the predictor's conditionals marginalize them — which
/// is only the right quantity when the predictor is exact (oracle mode).
/// Learned predictors have no identity covering free positions, so the
/// default is to require a full partition.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FreePositionPolicy {
    Reject,
    MarginalizeMasked,
}

fn validate_conditional_sets(
    truth: &Sequence,
    i1: &IndexSet,
    i2: &IndexSet,
    policy: FreePositionPolicy,
) -> Result<()> {
    let l = truth.len();
    if i1.len_bound() != l || i2.len_bound() != l {
        return Err(Error::InvalidArgument(
            "index-set bounds do not match the sequence length".into(),
        ));
    }
    if i1.is_empty() {
        return Err(Error::InvalidArgument(
            "the estimated (diffused) set must be nonempty".into(),
        ));
    }
    if !i1.is_disjoint(i2) {
        return Err(Error::InvalidArgument(
            "estimated and conditioning sets overlap".into(),
        ));
    }
    if policy == FreePositionPolicy::Reject && i1.len() + i2.len() != l {
        return Err(Error::InvalidArgument(
            "positions outside both sets are not covered by any identity for a learned predictor; \
             pass the marginalizing policy only with an exact predictor"
                .into(),
        ));
    }
    Ok(())
}

/// Core subset-sampling estimator of `−log p(truth^{I₁} | truth^{I₂})`:
/// draws `J ⊊ I₁`, unmasks `I₂ ∪ J`, scores `I₁ ∖ J`, scales by `H_{|I₁|}`.
fn subset_nll_core(
    truth: &Sequence,
    i1: &IndexSet,
    i2: &IndexSet,
    c: &dyn ConditionalPredictor,
    n_samples: usize,
    seed: u64,
    threads: usize,
    policy: FreePositionPolicy,
) -> Result<EstimateResult> {
    validate_conditional_sets(truth, i1, i2, policy)?;
    if n_samples == 0 {
        return Err(Error::InvalidArgument("need at least one sample".into()));
    }
    let sampler = SubsetSampler::new(i1.len())?;
    let h = sampler.harmonic();
    let outcomes = parallel_samples(n_samples, threads, |id| {
        let mut rng = substream(seed, id as u64);
        let k = sampler.sample_size(&mut rng);
        let j = uniform_subset(&mut rng, i1.indices(), k, truth.len());
        let keep = i2.union(&j)?;
        let state = apply_mask(truth, &keep)?;
        let mut outcome = neg_log_sum(truth, &state, &|i| i1.contains(i) && !j.contains(i), c)?;
        outcome.value *= h;
        Ok(outcome)
    })?;
    Ok(EstimateResult::from_outcomes(&outcomes, seed))
}

/// Monte Carlo `−log p₀(x₀)` without any time or noise-level variable:
/// one predictor evaluation per sample.
pub fn nll_time_free(
    x0: &Sequence,
    c: &dyn ConditionalPredictor,
    n_samples: usize,
    seed: u64,
    threads: usize,
) -> Result<EstimateResult> {
    let i1 = IndexSet::full(x0.len());
    let i2 = IndexSet::empty(x0.len());
    subset_nll_core(x0, &i1, &i2, c, n_samples, seed, threads, FreePositionPolicy::Reject)
}

/// Conditional variant: `−log p₀(x^{I₁} | x^{I₂})`.
pub fn conditional_nll_time_free(
    x: &Sequence,
    i1: &IndexSet,
    i2: &IndexSet,
    c: &dyn ConditionalPredictor,
    n_samples: usize,
    seed: u64,
    threads: usize,
    policy: FreePositionPolicy,
) -> Result<EstimateResult> {
    subset_nll_core(x, i1, i2, c, n_samples, seed, threads, policy)
}

/// Deterministic weighted sum over all proper subsets — the exact target
/// of [`nll_time_free`]. Needs `2^L` predictor evaluations.
#[derive(Debug, Clone, Serialize)]
pub struct ExactSubsetNll {
    pub nats: f64,
    pub clamp_count: usize,
}

pub fn exact_subset_sum_nll(x0: &Sequence, c: &dyn ConditionalPredictor) -> Result<ExactSubsetNll> {
    let l = x0.len();
    if l > SUBSET_SUM_CAP {
        return Err(Error::CapExceeded {
            what: "exact subset sum",
            needed: 1u128 << l,
            cap: 1u128 << SUBSET_SUM_CAP,
        });
    }
    // Subset weight for |I| = k: (L−k−1)!·k!/L!, i.e. B(L−k, k+1).
    let mut fact = vec![1.0f64; l + 1];
    for j in 1..=l {
        fact[j] = fact[j - 1] * j as f64;
    }
    let weight = |k: usize| fact[l - k - 1] * fact[k] / fact[l];
    let full = (1u32 << l) - 1;
    let mut total = KahanSum::new();
    let mut clamp_count = 0usize;
    for bits in 0..full {
        let keep_vec: Vec<usize> = (0..l).filter(|&i| bits & (1 << i) != 0).collect();
        let k = keep_vec.len();
        let keep = IndexSet::from_sorted(keep_vec, l)?;
        let state = apply_mask(x0, &keep)?;
        let outcome = neg_log_sum(x0, &state, &|_| true, c)?;
        clamp_count += outcome.clamps;
        total.add(weight(k) * outcome.value);
    }
    Ok(ExactSubsetNll {
        nats: total.value(),
        clamp_count,
    })
}

fn validate_lambda_domain(quad: &QuadratureSpec) -> Result<()> {
    quad.validate()?;
    if !(quad.lower > 0.0 && quad.upper <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "noise-level integral needs a domain inside (0, 1], got [{}, {}]",
            quad.lower, quad.upper
        )));
    }
    Ok(())
}

/// Core noise-level-integral estimator of `−log p(truth^{I₁}|truth^{I₂})
/// = ∫₀¹ (1/λ)·E[Σ_{masked i ∈ I₁} −ln c(x_λ)_{i,truthⁱ}] dλ`, truncated
/// to the spec's domain.
///
/// With `n_mc_per_node = 0` the inner expectation is enumerated exactly
/// (2^|I₁| patterns) and the result is deterministic; otherwise each
/// static quadrature node gets `n_mc_per_node` masking draws and the
/// node-propagated standard error is reported.
fn integral_nll_core(
    truth: &Sequence,
    i1: &IndexSet,
    i2: &IndexSet,
    c: &dyn ConditionalPredictor,
    quad: &QuadratureSpec,
    n_mc_per_node: usize,
    seed: u64,
    threads: usize,
    policy: FreePositionPolicy,
) -> Result<EstimateResult> {
    validate_conditional_sets(truth, i1, i2, policy)?;
    validate_lambda_domain(quad)?;
    let eps = quad.lower;
    if n_mc_per_node == 0 {
        let k = i1.len();
        if k > PATTERN_CAP {
            return Err(Error::CapExceeded {
                what: "exact masked-loss expectation",
                needed: 1u128 << k,
                cap: 1u128 << PATTERN_CAP,
            });
        }
        let mut clamp_count = 0usize;
        let mut off_support = 0usize;
        let mut evaluations = 0usize;
        let mut integrand = |lambda: f64| -> Result<f64> {
            evaluations += 1;
            let mut expected = KahanSum::new();
            for bits in 0u32..(1u32 << k) {
                let m = bits.count_ones() as usize;
                let w = crate::kernel::log_mask_pattern_probability(m, k - m, lambda).exp();
                if w == 0.0 {
                    continue;
                }
                let keep_extra: Vec<usize> = i1
                    .indices()
                    .iter()
                    .enumerate()
                    .filter(|&(slot, _)| bits & (1 << slot) == 0)
                    .map(|(_, &pos)| pos)
                    .collect();
                let keep = i2.union(&IndexSet::from_sorted(keep_extra, truth.len())?)?;
                let state = apply_mask(truth, &keep)?;
                let outcome =
                    neg_log_sum(truth, &state, &|i| i1.contains(i) && state.is_masked(i), c)?;
                clamp_count += outcome.clamps;
                if outcome.off_support {
                    off_support += 1;
                }
                expected.add(w * outcome.value);
            }
            Ok(expected.value() / lambda)
        };
        let mean = quad.integrate(&mut integrand)?;
        let bias = integrand(eps)? * eps;
        return Ok(EstimateResult {
            mean,
            variance: 0.0,
            n_samples: evaluations,
            stderr: 0.0,
            seed,
            clamp_count,
            off_support_count: off_support,
            truncation_bias_bound: Some(bias),
        });
    }

    // Monte Carlo inner expectations on static nodes, plus one extra
    // stratum at the left endpoint that estimates the truncation bias.
    let nodes = quad.nodes().map_err(|_| {
        Error::InvalidArgument(
            "per-node Monte Carlo needs a fixed-node quadrature rule".into(),
        )
    })?;
    let m = n_mc_per_node;
    let n_total = nodes.len() * m + m;
    let draw_loss = |id: usize| -> Result<SampleOutcome> {
        let lambda = if id < nodes.len() * m {
            nodes[id / m].0
        } else {
            eps
        };
        let mut rng = substream(seed, id as u64);
        let mut tokens = truth.tokens().to_vec();
        let mask = crate::types::mask_token(truth.alphabet_size());
        for i in 0..truth.len() {
            let in_i1 = i1.contains(i);
            if in_i1 {
                if rng.random::<f64>() < lambda {
                    tokens[i] = mask;
                }
            } else if !i2.contains(i) {
                tokens[i] = mask; // free position under the marginalizing policy
            }
        }
        let state = MaskedSequence::new(tokens, truth.alphabet_size())?;
        neg_log_sum(truth, &state, &|i| i1.contains(i) && state.is_masked(i), c)
    };
    let outcomes = parallel_samples(n_total, threads, draw_loss)?;
    let clamp_count = outcomes.iter().map(|o| o.clamps).sum();
    let off_support_count = outcomes.iter().filter(|o| o.off_support).count();
    if outcomes.iter().any(|o| !o.value.is_finite()) {
        return Ok(EstimateResult {
            mean: f64::INFINITY,
            variance: f64::INFINITY,
            n_samples: n_total,
            stderr: f64::INFINITY,
            seed,
            clamp_count,
            off_support_count,
            truncation_bias_bound: None,
        });
    }
    let stratum_stats = |values: &[SampleOutcome]| {
        let mut total = KahanSum::new();
        for o in values {
            total.add(o.value);
        }
        let mean = total.value() / values.len() as f64;
        let mut ss = KahanSum::new();
        for o in values {
            let d = o.value - mean;
            ss.add(d * d);
        }
        let var = if values.len() > 1 {
            ss.value() / (values.len() - 1) as f64
        } else {
            0.0
        };
        (mean, var)
    };
    let mut mean = KahanSum::new();
    let mut stderr_sq = KahanSum::new();
    for (j, &(lambda, w)) in nodes.iter().enumerate() {
        let (node_mean, node_var) = stratum_stats(&outcomes[j * m..(j + 1) * m]);
        let scale = w / lambda;
        mean.add(scale * node_mean);
        stderr_sq.add(scale * scale * node_var / m as f64);
    }
    let (bias_mean, _) = stratum_stats(&outcomes[nodes.len() * m..]);
    let stderr = stderr_sq.value().sqrt();
    Ok(EstimateResult {
        mean: mean.value(),
        variance: stderr * stderr * n_total as f64,
        n_samples: n_total,
        stderr,
        seed,
        clamp_count,
        off_support_count,
        truncation_bias_bound: Some(bias_mean),
    })
}

/// Noise-level-integral `−log p₀(x₀)` (quadrature outside, exact or MC
/// masking expectation inside).
pub fn nll_time_integral(
    x0: &Sequence,
    c: &dyn ConditionalPredictor,
    quad: &QuadratureSpec,
    n_mc_per_node: usize,
    seed: u64,
    threads: usize,
) -> Result<EstimateResult> {
    let i1 = IndexSet::full(x0.len());
    let i2 = IndexSet::empty(x0.len());
    integral_nll_core(
        x0,
        &i1,
        &i2,
        c,
        quad,
        n_mc_per_node,
        seed,
        threads,
        FreePositionPolicy::Reject,
    )
}

/// Conditional noise-level integral: only `I₁` positions are diffused,
/// `I₂` stays clean.
#[allow(clippy::too_many_arguments)]
pub fn conditional_nll_time_integral(
    x: &Sequence,
    i1: &IndexSet,
    i2: &IndexSet,
    c: &dyn ConditionalPredictor,
    quad: &QuadratureSpec,
    n_mc_per_node: usize,
    seed: u64,
    threads: usize,
    policy: FreePositionPolicy,
) -> Result<EstimateResult> {
    integral_nll_core(x, i1, i2, c, quad, n_mc_per_node, seed, threads, policy)
}

/// Single-draw noise-level Monte Carlo baseline: `λ ~ Uniform(ε, 1)`,
/// importance weight `(1−ε)/λ`, one masking draw and one predictor call
/// per sample. Same target as [`nll_time_integral`] over `[ε, 1]`.
pub fn nll_lambda_importance(
    x0: &Sequence,
    c: &dyn ConditionalPredictor,
    eps: f64,
    n_samples: usize,
    seed: u64,
    threads: usize,
) -> Result<EstimateResult> {
    if !(eps > 0.0 && eps <= 0.01) {
        return Err(Error::InvalidArgument(format!(
            "λ truncation must lie in (0, 0.01], got {eps}"
        )));
    }
    if n_samples == 0 {
        return Err(Error::InvalidArgument("need at least one sample".into()));
    }
    let outcomes = parallel_samples(n_samples, threads, |id| {
        let mut rng = substream(seed, id as u64);
        let lambda = eps + (1.0 - eps) * rng.random::<f64>();
        let state = crate::kernel::sample_forward(x0, lambda, &mut rng)?;
        let mut outcome = neg_log_sum(x0, &state, &|_| true, c)?;
        outcome.value *= (1.0 - eps) / lambda;
        Ok(outcome)
    })?;
    Ok(EstimateResult::from_outcomes(&outcomes, seed))
}

/// Coupled log-likelihood-ratio estimator for `log p₀(y) − log p₀(x)`:
/// each sample reuses ONE mask subset for both sequences.
pub fn ratio_coupled(
    x: &Sequence,
    y: &Sequence,
    c: &dyn ConditionalPredictor,
    n_samples: usize,
    seed: u64,
    threads: usize,
) -> Result<EstimateResult> {
    ratio_core(x, y, c, n_samples, seed, threads, true)
}

/// Decoupled counterpart: independent subsets per arm. Same mean, more
/// variance.
pub fn ratio_decoupled(
    x: &Sequence,
    y: &Sequence,
    c: &dyn ConditionalPredictor,
    n_samples: usize,
    seed: u64,
    threads: usize,
) -> Result<EstimateResult> {
    ratio_core(x, y, c, n_samples, seed, threads, false)
}

fn ratio_core(
    x: &Sequence,
    y: &Sequence,
    c: &dyn ConditionalPredictor,
    n_samples: usize,
    seed: u64,
    threads: usize,
    coupled: bool,
) -> Result<EstimateResult> {
    if x.len() != y.len() || x.alphabet_size() != y.alphabet_size() {
        return Err(Error::InvalidArgument(
            "ratio estimation needs sequences of equal length over one alphabet".into(),
        ));
    }
    if n_samples == 0 {
        return Err(Error::InvalidArgument("need at least one sample".into()));
    }
    let sampler = SubsetSampler::new(x.len())?;
    let h = sampler.harmonic();
    let outcomes = parallel_samples(n_samples, threads, |id| {
        let mut rng = substream(seed, id as u64);
        let keep_x = sampler.sample_subset(&mut rng);
        let keep_y = if coupled {
            keep_x.clone()
        } else {
            sampler.sample_subset(&mut rng)
        };
        let arm_x = neg_log_sum(x, &apply_mask(x, &keep_x)?, &|_| true, c)?;
        let arm_y = neg_log_sum(y, &apply_mask(y, &keep_y)?, &|_| true, c)?;
        Ok(SampleOutcome {
            value: h * (arm_x.value - arm_y.value),
            clamps: arm_x.clamps + arm_y.clamps,
            off_support: arm_x.off_support || arm_y.off_support,
        })
    })?;
    Ok(EstimateResult::from_outcomes(&outcomes, seed))
}

/// Coupled conditional ratio `log p₀(y_resp|prompt) − log p₀(x_resp|prompt)`
/// with a shared unmask subset over the response positions and the clean
/// prompt visible to both arms.
pub fn ratio_coupled_conditional(
    prompt: &Sequence,
    x_resp: &Sequence,
    y_resp: &Sequence,
    c: &dyn ConditionalPredictor,
    n_samples: usize,
    seed: u64,
    threads: usize,
) -> Result<EstimateResult> {
    conditional_ratio_core(prompt, x_resp, y_resp, c, n_samples, seed, threads, true)
}

/// Decoupled conditional ratio: independent response subsets per arm.
pub fn ratio_decoupled_conditional(
    prompt: &Sequence,
    x_resp: &Sequence,
    y_resp: &Sequence,
    c: &dyn ConditionalPredictor,
    n_samples: usize,
    seed: u64,
    threads: usize,
) -> Result<EstimateResult> {
    conditional_ratio_core(prompt, x_resp, y_resp, c, n_samples, seed, threads, false)
}

#[allow(clippy::too_many_arguments)]
fn conditional_ratio_core(
    prompt: &Sequence,
    x_resp: &Sequence,
    y_resp: &Sequence,
    c: &dyn ConditionalPredictor,
    n_samples: usize,
    seed: u64,
    threads: usize,
    coupled: bool,
) -> Result<EstimateResult> {
    if x_resp.len() != y_resp.len()
        || x_resp.alphabet_size() != y_resp.alphabet_size()
        || prompt.alphabet_size() != x_resp.alphabet_size()
    {
        return Err(Error::InvalidArgument(
            "responses must have equal length over the prompt's alphabet".into(),
        ));
    }
    if n_samples == 0 {
        return Err(Error::InvalidArgument("need at least one sample".into()));
    }
    let p = prompt.len();
    let r = x_resp.len();
    let l = p + r;
    let n = prompt.alphabet_size();
    let concat = |resp: &Sequence| -> Result<Sequence> {
        let mut tokens = prompt.tokens().to_vec();
        tokens.extend_from_slice(resp.tokens());
        Sequence::new(tokens, n)
    };
    let full_x = concat(x_resp)?;
    let full_y = concat(y_resp)?;
    let i1 = IndexSet::from_sorted((p..l).collect(), l)?;
    let i2 = IndexSet::from_sorted((0..p).collect(), l)?;
    let sampler = SubsetSampler::new(r)?;
    let h = sampler.harmonic();
    let outcomes = parallel_samples(n_samples, threads, |id| {
        let mut rng = substream(seed, id as u64);
        let draw = |rng: &mut _| -> Result<IndexSet> {
            let k = sampler.sample_size(rng);
            Ok(uniform_subset(rng, i1.indices(), k, l))
        };
        let j_x = draw(&mut rng)?;
        let j_y = if coupled { j_x.clone() } else { draw(&mut rng)? };
        let score_arm = |full: &Sequence, j: &IndexSet| -> Result<SampleOutcome> {
            let keep = i2.union(j)?;
            let state = apply_mask(full, &keep)?;
            neg_log_sum(full, &state, &|i| i1.contains(i) && !j.contains(i), c)
        };
        let arm_x = score_arm(&full_x, &j_x)?;
        let arm_y = score_arm(&full_y, &j_y)?;
        Ok(SampleOutcome {
            value: h * (arm_x.value - arm_y.value),
            clamps: arm_x.clamps + arm_y.clamps,
            off_support: arm_x.off_support || arm_y.off_support,
        })
    })?;
    Ok(EstimateResult::from_outcomes(&outcomes, seed))
}

/// Any-order autoregressive baseline: per sample, draw a uniform
/// permutation and unmask one position at a time, scoring each newly
/// revealed token — `L` predictor evaluations per sample.
pub fn nll_ao_autoregressive(
    x0: &Sequence,
    c: &dyn ConditionalPredictor,
    n_samples: usize,
    seed: u64,
    threads: usize,
) -> Result<EstimateResult> {
    if n_samples == 0 {
        return Err(Error::InvalidArgument("need at least one sample".into()));
    }
    let l = x0.len();
    let outcomes = parallel_samples(n_samples, threads, |id| {
        let mut rng = substream(seed, id as u64);
        let mut order: Vec<usize> = (0..l).collect();
        order.shuffle(&mut rng);
        let mut state = MaskedSequence::fully_masked(l, x0.alphabet_size())?;
        let mut total = KahanSum::new();
        let mut clamps = 0usize;
        for &pos in &order {
            let step = neg_log_sum(x0, &state, &|i| i == pos, c)?;
            if step.off_support {
                return Ok(SampleOutcome {
                    value: f64::INFINITY,
                    clamps,
                    off_support: true,
                });
            }
            total.add(step.value);
            clamps += step.clamps;
            state = state.with_token(pos, x0.token(pos))?;
        }
        Ok(SampleOutcome {
            value: total.value(),
            clamps,
            off_support: false,
        })
    })?;
    Ok(EstimateResult::from_outcomes(&outcomes, seed))
}

/// Cap on the sequence length for enumerating every unmasking order.
pub const AO_ENUMERATION_CAP: usize = 8;

/// Deterministic average over all `L!` unmasking orders — the exact
/// target of [`nll_ao_autoregressive`], computed with `L!·L` predictor
/// evaluations. Equals `−log p₀(x₀)` for an exact predictor.
pub fn nll_ao_exact(x0: &Sequence, c: &dyn ConditionalPredictor) -> Result<ExactSubsetNll> {
    let l = x0.len();
    if l > AO_ENUMERATION_CAP {
        let needed = (1..=l as u128).product();
        let cap = (1..=AO_ENUMERATION_CAP as u128).product();
        return Err(Error::CapExceeded {
            what: "unmasking-order enumeration",
            needed,
            cap,
        });
    }
    let mut order: Vec<usize> = (0..l).collect();
    let mut total = KahanSum::new();
    let mut clamp_count = 0usize;
    let mut count = 0usize;
    // Heap's algorithm visits each permutation exactly once.
    let mut stack = vec![0usize; l];
    let mut score_order = |order: &[usize]| -> Result<()> {
        let mut state = MaskedSequence::fully_masked(l, x0.alphabet_size())?;
        for &pos in order {
            let step = neg_log_sum(x0, &state, &|i| i == pos, c)?;
            clamp_count += step.clamps;
            total.add(step.value);
            state = state.with_token(pos, x0.token(pos))?;
        }
        count += 1;
        Ok(())
    };
    score_order(&order)?;
    let mut i = 1;
    while i < l {
        if stack[i] < i {
            if i % 2 == 0 {
                order.swap(0, i);
            } else {
                order.swap(stack[i], i);
            }
            score_order(&order)?;
            stack[i] += 1;
            i = 1;
        } else {
            stack[i] = 0;
            i += 1;
        }
    }
    Ok(ExactSubsetNll {
        nats: total.value() / count as f64,
        clamp_count,
    })
}

/// Size-stratified variant of the subset estimator with self-piloted
/// sample allocation.
///
/// A quarter of the budget is spent proportionally to the size law
/// (at least 8 draws per stratum) to estimate per-size spreads; the rest
/// is allocated proportionally to `P(k)·σ̂_k`, which minimizes the
/// variance of the stratified mean. Unbiased for the same target as the
/// plain estimator, with the same per-sample cost.
pub fn nll_time_free_stratified(
    x0: &Sequence,
    c: &dyn ConditionalPredictor,
    n_samples: usize,
    seed: u64,
    threads: usize,
) -> Result<EstimateResult> {
    let i1 = IndexSet::full(x0.len());
    let i2 = IndexSet::empty(x0.len());
    stratified_subset_core(x0, &i1, &i2, c, n_samples, seed, threads, FreePositionPolicy::Reject)
}

/// Stratified conditional estimator; see [`nll_time_free_stratified`].
#[allow(clippy::too_many_arguments)]
pub fn conditional_nll_time_free_stratified(
    x: &Sequence,
    i1: &IndexSet,
    i2: &IndexSet,
    c: &dyn ConditionalPredictor,
    n_samples: usize,
    seed: u64,
    threads: usize,
    policy: FreePositionPolicy,
) -> Result<EstimateResult> {
    stratified_subset_core(x, i1, i2, c, n_samples, seed, threads, policy)
}

#[allow(clippy::too_many_arguments)]
fn stratified_subset_core(
    truth: &Sequence,
    i1: &IndexSet,
    i2: &IndexSet,
    c: &dyn ConditionalPredictor,
    n_samples: usize,
    seed: u64,
    threads: usize,
    policy: FreePositionPolicy,
) -> Result<EstimateResult> {
    validate_conditional_sets(truth, i1, i2, policy)?;
    let k_max = i1.len();
    if n_samples < 2 * MIN_PILOT_PER_STRATUM * k_max {
        return Err(Error::InvalidArgument(format!(
            "stratified estimation over {k_max} strata needs at least {} samples, got {n_samples}",
            2 * MIN_PILOT_PER_STRATUM * k_max
        )));
    }
    let sampler = SubsetSampler::new(k_max)?;
    let h = sampler.harmonic();

    // One stratum per subset size; a draw in stratum k needs only the
    // uniform k-subset, the size being fixed.
    let draw_in_stratum = |k: usize, id: usize| -> Result<SampleOutcome> {
        let mut rng = substream(seed, id as u64);
        let j = uniform_subset(&mut rng, i1.indices(), k, truth.len());
        let keep = i2.union(&j)?;
        let state = apply_mask(truth, &keep)?;
        let mut outcome = neg_log_sum(truth, &state, &|i| i1.contains(i) && !j.contains(i), c)?;
        outcome.value *= h;
        Ok(outcome)
    };

    // Pilot phase: ∝ P(k) with a floor.
    let pilot_budget = n_samples / 4;
    let pilot_counts: Vec<usize> = (0..k_max)
        .map(|k| {
            MIN_PILOT_PER_STRATUM
                .max((pilot_budget as f64 * sampler.size_probability(k)).round() as usize)
        })
        .collect();
    let pilot_total: usize = pilot_counts.iter().sum();
    let plan: Vec<(usize, usize)> = {
        // Flat (stratum, global-id) list, ids assigned stratum-major so the
        // stream layout is deterministic.
        let mut plan = Vec::with_capacity(pilot_total);
        let mut next_id = 0usize;
        for (k, &count) in pilot_counts.iter().enumerate() {
            for _ in 0..count {
                plan.push((k, next_id));
                next_id += 1;
            }
        }
        plan
    };
    let pilot = parallel_samples(plan.len(), threads, |slot| {
        let (k, id) = plan[slot];
        draw_in_stratum(k, id)
    })?;

    // Per-stratum spread estimates.
    let mut offset = 0usize;
    let mut pilot_slices: Vec<&[SampleOutcome]> = Vec::with_capacity(k_max);
    for &count in &pilot_counts {
        pilot_slices.push(&pilot[offset..offset + count]);
        offset += count;
    }
    let sigma_hat: Vec<f64> = pilot_slices
        .iter()
        .map(|s| {
            let mean = s.iter().map(|o| o.value).sum::<f64>() / s.len() as f64;
            let ss: f64 = s.iter().map(|o| (o.value - mean) * (o.value - mean)).sum();
            (ss / (s.len() - 1) as f64).sqrt()
        })
        .collect();

    // Allocation of the remaining budget ∝ P(k)·σ̂_k (largest remainder).
    let remaining = n_samples - pilot_total.min(n_samples);
    let mut alloc_weights: Vec<f64> = (0..k_max)
        .map(|k| sampler.size_probability(k) * sigma_hat[k])
        .collect();
    if alloc_weights.iter().all(|&w| w == 0.0 || !w.is_finite()) {
        alloc_weights = (0..k_max).map(|k| sampler.size_probability(k)).collect();
    }
    let weight_total: f64 = alloc_weights.iter().sum();
    let mut extra_counts: Vec<usize> = alloc_weights
        .iter()
        .map(|w| ((remaining as f64) * w / weight_total).floor() as usize)
        .collect();
    let mut leftover = remaining - extra_counts.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..k_max).collect();
    order.sort_by(|&a, &b| {
        let frac = |k: usize| {
            let exact = remaining as f64 * alloc_weights[k] / weight_total;
            exact - exact.floor()
        };
        frac(b).total_cmp(&frac(a)).then(a.cmp(&b))
    });
    for &k in order.iter().cycle().take(leftover.min(remaining)) {
        extra_counts[k] += 1;
        leftover -= 1;
        if leftover == 0 {
            break;
        }
    }

    let extra_plan: Vec<(usize, usize)> = {
        let mut plan = Vec::with_capacity(remaining);
        let mut next_id = pilot_total;
        for (k, &count) in extra_counts.iter().enumerate() {
            for _ in 0..count {
                plan.push((k, next_id));
                next_id += 1;
            }
        }
        plan
    };
    let extra = parallel_samples(extra_plan.len(), threads, |slot| {
        let (k, id) = extra_plan[slot];
        draw_in_stratum(k, id)
    })?;

    // Combine phases per stratum and form the stratified mean.
    let mut extra_slices: Vec<&[SampleOutcome]> = Vec::with_capacity(k_max);
    let mut eoff = 0usize;
    for &count in &extra_counts {
        extra_slices.push(&extra[eoff..eoff + count]);
        eoff += count;
    }
    let clamp_count = pilot.iter().chain(&extra).map(|o| o.clamps).sum();
    let off_support_count = pilot.iter().chain(&extra).filter(|o| o.off_support).count();
    let total_n = pilot_total + remaining;
    if pilot.iter().chain(&extra).any(|o| !o.value.is_finite()) {
        return Ok(EstimateResult {
            mean: f64::INFINITY,
            variance: f64::INFINITY,
            n_samples: total_n,
            stderr: f64::INFINITY,
            seed,
            clamp_count,
            off_support_count,
            truncation_bias_bound: None,
        });
    }
    let mut mean = KahanSum::new();
    let mut stderr_sq = KahanSum::new();
    for k in 0..k_max {
        let values: Vec<f64> = pilot_slices[k]
            .iter()
            .chain(extra_slices[k])
            .map(|o| o.value)
            .collect();
        let n_k = values.len();
        let mut sum = KahanSum::new();
        for &v in &values {
            sum.add(v);
        }
        let mu_k = sum.value() / n_k as f64;
        let mut ss = KahanSum::new();
        for &v in &values {
            let d = v - mu_k;
            ss.add(d * d);
        }
        let var_k = if n_k > 1 { ss.value() / (n_k - 1) as f64 } else { 0.0 };
        let p_k = sampler.size_probability(k);
        mean.add(p_k * mu_k);
        stderr_sq.add(p_k * p_k * var_k / n_k as f64);
    }
    let stderr = stderr_sq.value().sqrt();
    Ok(EstimateResult {
        mean: mean.value(),
        variance: stderr * stderr * total_n as f64,
        n_samples: total_n,
        stderr,
        seed,
        clamp_count,
        off_support_count,
        truncation_bias_bound: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::{ExplicitCategorical, OracleDistribution};
    use crate::predictor::OraclePredictor;
    use crate::quadrature::QuadratureRule;
    use approx::assert_abs_diff_eq;

    fn seq(tokens: &[u16], n: u16) -> Sequence {
        Sequence::new(tokens.to_vec(), n).unwrap()
    }

    /// Three atoms over N = 2, L = 3 with unequal masses.
    fn toy3() -> OracleDistribution {
        OracleDistribution::Categorical(
            ExplicitCategorical::new(vec![
                (seq(&[0, 0, 1], 2), 0.5),
                (seq(&[0, 1, 1], 2), 0.3),
                (seq(&[1, 0, 0], 2), 0.2),
            ])
            .unwrap(),
        )
    }

    #[test]
    fn size_law_sums_to_one_and_matches_closed_form() {
        for l in [1usize, 2, 5, 16, 40] {
            let sampler = SubsetSampler::new(l).unwrap();
            let total: f64 = (0..l).map(|k| sampler.size_probability(k)).sum();
            assert_abs_diff_eq!(total, 1.0, epsilon = 1e-12);
        }
        let s2 = SubsetSampler::new(2).unwrap();
        assert_abs_diff_eq!(s2.size_probability(0), 1.0 / 3.0, epsilon = 1e-15);
        assert_abs_diff_eq!(s2.size_probability(1), 2.0 / 3.0, epsilon = 1e-15);
        assert_abs_diff_eq!(s2.harmonic(), 1.5, epsilon = 1e-15);
    }

    #[test]
    fn induced_subset_law_matches_the_beta_formula() {
        // Two-stage probability of each subset equals
        // B(L−k, k+1)/H_L = (L−k−1)!·k!/(L!·H_L), enumerated for L ≤ 10.
        for l in 1..=10usize {
            let sampler = SubsetSampler::new(l).unwrap();
            let mut fact = vec![1.0f64; l + 1];
            for j in 1..=l {
                fact[j] = fact[j - 1] * j as f64;
            }
            let mut total = 0.0;
            for k in 0..l {
                let beta_form = fact[l - k - 1] * fact[k] / (fact[l] * sampler.harmonic());
                assert_abs_diff_eq!(sampler.subset_probability(k), beta_form, epsilon = 1e-14);
                total += sampler.subset_probability(k) * binomial(l, k);
            }
            assert_abs_diff_eq!(total, 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn single_position_sampler_always_returns_the_empty_set() {
        let sampler = SubsetSampler::new(1).unwrap();
        let mut rng = substream(3, 0);
        for _ in 0..50 {
            assert!(sampler.sample_subset(&mut rng).is_empty());
        }
    }

    #[test]
    fn empirical_size_histogram_passes_chi_square() {
        let l = 8usize;
        let sampler = SubsetSampler::new(l).unwrap();
        let draws = 100_000usize;
        let mut counts = vec![0usize; l];
        let mut rng = substream(99, 0);
        for _ in 0..draws {
            counts[sampler.sample_size(&mut rng)] += 1;
        }
        let chi2: f64 = (0..l)
            .map(|k| {
                let expected = draws as f64 * sampler.size_probability(k);
                let d = counts[k] as f64 - expected;
                d * d / expected
            })
            .sum();
        // 99th percentile of chi-square with 7 degrees of freedom.
        assert!(chi2 < 18.4753, "chi-square statistic {chi2}");
    }

    #[test]
    fn exact_subset_sum_recovers_log_probability() {
        let d = toy3();
        let predictor = OraclePredictor::new(d.clone());
        for (x0, p) in d.enumerate_support().unwrap() {
            let exact = exact_subset_sum_nll(&x0, &predictor).unwrap();
            assert_abs_diff_eq!(exact.nats, -p.ln(), epsilon = 1e-9);
            assert_eq!(exact.clamp_count, 0);
        }
    }

    #[test]
    fn exact_subset_sum_factorizes_over_independent_tokens() {
        let marginals = vec![vec![0.2, 0.5, 0.3], vec![0.6, 0.1, 0.3], vec![0.25, 0.25, 0.5]];
        let d = OracleDistribution::Categorical(
            ExplicitCategorical::from_independent_marginals(&marginals).unwrap(),
        );
        let predictor = OraclePredictor::new(d);
        let x0 = seq(&[1, 0, 2], 3);
        let expected = -(0.5f64.ln() + 0.6f64.ln() + 0.5f64.ln());
        let exact = exact_subset_sum_nll(&x0, &predictor).unwrap();
        assert_abs_diff_eq!(exact.nats, expected, epsilon = 1e-12);
    }

    #[test]
    fn exact_subset_sum_single_position_is_one_term() {
        let p = 0.3f64;
        let d = OracleDistribution::Categorical(
            ExplicitCategorical::new(vec![(seq(&[0], 2), p), (seq(&[1], 2), 1.0 - p)]).unwrap(),
        );
        let predictor = OraclePredictor::new(d);
        let exact = exact_subset_sum_nll(&seq(&[0], 2), &predictor).unwrap();
        assert_abs_diff_eq!(exact.nats, -p.ln(), epsilon = 1e-15);
    }

    #[test]
    fn exact_subset_sum_refuses_long_sequences() {
        let d = OracleDistribution::Categorical(ExplicitCategorical::uniform(2, 13).unwrap());
        let predictor = OraclePredictor::new(d);
        let x0 = seq(&[0u16; 13].to_vec()[..], 2);
        assert!(matches!(
            exact_subset_sum_nll(&x0, &predictor),
            Err(Error::CapExceeded { .. })
        ));
    }

    #[test]
    fn time_free_estimate_is_consistent_with_the_exact_sum() {
        let d = toy3();
        let predictor = OraclePredictor::new(d);
        let x0 = seq(&[0, 0, 1], 2);
        let exact = exact_subset_sum_nll(&x0, &predictor).unwrap().nats;
        let est = nll_time_free(&x0, &predictor, 10_000, 17, 1).unwrap();
        assert!(
            (est.mean - exact).abs() <= 4.0 * est.stderr,
            "mean {} vs exact {exact}, stderr {}",
            est.mean,
            est.stderr
        );
        assert_eq!(est.n_samples, 10_000);
        assert_abs_diff_eq!(
            est.stderr,
            (est.variance / est.n_samples as f64).sqrt(),
            epsilon = 1e-15
        );
    }

    #[test]
    fn single_position_estimate_is_deterministic() {
        let p = 0.3f64;
        let d = OracleDistribution::Categorical(
            ExplicitCategorical::new(vec![(seq(&[0], 2), p), (seq(&[1], 2), 1.0 - p)]).unwrap(),
        );
        let predictor = OraclePredictor::new(d);
        let est = nll_time_free(&seq(&[0], 2), &predictor, 32, 5, 1).unwrap();
        assert_abs_diff_eq!(est.mean, -p.ln(), epsilon = 1e-12);
        assert!(est.stderr < 1e-15);
    }

    #[test]
    fn results_are_identical_across_thread_counts() {
        let d = toy3();
        let predictor = OraclePredictor::new(d);
        let x0 = seq(&[0, 1, 1], 2);
        let one = nll_time_free(&x0, &predictor, 500, 21, 1).unwrap();
        let four = nll_time_free(&x0, &predictor, 500, 21, 4).unwrap();
        assert_eq!(one.mean.to_bits(), four.mean.to_bits());
        assert_eq!(one.variance.to_bits(), four.variance.to_bits());
        let other_seed = nll_time_free(&x0, &predictor, 500, 22, 1).unwrap();
        assert_ne!(one.mean.to_bits(), other_seed.mean.to_bits());
    }

    #[test]
    fn off_support_sequences_produce_an_infinite_flagged_estimate() {
        let d = toy3();
        let predictor = OraclePredictor::new(d);
        // (1,1,0) is not an atom: conditioning on its unmasked part can
        // hit a zero-probability event.
        let est = nll_time_free(&seq(&[1, 1, 0], 2), &predictor, 64, 9, 1).unwrap();
        assert!(est.mean.is_infinite());
        assert!(est.off_support_count > 0);
    }

    #[test]
    fn clamped_probabilities_are_counted() {
        struct NearZero;
        impl ConditionalPredictor for NearZero {
            fn predict(&self, x: &MaskedSequence) -> Result<Vec<(usize, Vec<f64>)>> {
                Ok(x.masked_indices()
                    .into_iter()
                    .map(|i| (i, vec![1.0 - 1e-15, 1e-15]))
                    .collect())
            }
        }
        let est = nll_time_free(&seq(&[1, 1], 2), &NearZero, 200, 4, 1).unwrap();
        assert!(est.clamp_count > 0);
        assert!(est.mean.is_finite());
    }

    #[test]
    fn exact_integral_recovers_log_probability_with_bias_correction() {
        let d = toy3();
        let predictor = OraclePredictor::new(d.clone());
        let quad = QuadratureSpec::lambda_domain(
            QuadratureRule::CompositeGaussLegendre {
                nodes: 64,
                panels: 1,
            },
            1e-4,
        )
        .unwrap();
        for (x0, p) in d.enumerate_support().unwrap() {
            let est = nll_time_integral(&x0, &predictor, &quad, 0, 0, 1).unwrap();
            let corrected = est.mean + est.truncation_bias_bound.unwrap();
            assert_abs_diff_eq!(corrected, -p.ln(), epsilon = 1e-6);
            assert_eq!(est.stderr, 0.0);
        }
    }

    #[test]
    fn exact_integral_is_zero_for_a_single_atom() {
        let atom = OracleDistribution::Categorical(
            ExplicitCategorical::new(vec![(seq(&[0, 1], 2), 1.0)]).unwrap(),
        );
        let predictor = OraclePredictor::new(atom);
        let quad = QuadratureSpec::lambda_domain(
            QuadratureRule::CompositeGaussLegendre {
                nodes: 16,
                panels: 1,
            },
            1e-4,
        )
        .unwrap();
        let est = nll_time_integral(&seq(&[0, 1], 2), &predictor, &quad, 0, 0, 1).unwrap();
        assert_abs_diff_eq!(est.mean, 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(est.truncation_bias_bound.unwrap(), 0.0, epsilon = 1e-15);
    }

    #[test]
    fn adaptive_rule_agrees_with_fixed_nodes_in_exact_mode() {
        let d = toy3();
        let predictor = OraclePredictor::new(d);
        let x0 = seq(&[0, 1, 1], 2);
        let fixed = QuadratureSpec::lambda_domain(
            QuadratureRule::CompositeGaussLegendre {
                nodes: 64,
                panels: 1,
            },
            1e-3,
        )
        .unwrap();
        let adaptive = QuadratureSpec::lambda_domain(
            QuadratureRule::AdaptiveSimpson { tolerance: 1e-10 },
            1e-3,
        )
        .unwrap();
        let a = nll_time_integral(&x0, &predictor, &fixed, 0, 0, 1).unwrap();
        let b = nll_time_integral(&x0, &predictor, &adaptive, 0, 0, 1).unwrap();
        assert_abs_diff_eq!(a.mean, b.mean, epsilon = 1e-8);
    }

    #[test]
    fn monte_carlo_integral_is_consistent_and_rejects_adaptive_rules() {
        let d = toy3();
        let predictor = OraclePredictor::new(d);
        let x0 = seq(&[0, 0, 1], 2);
        let quad = QuadratureSpec::lambda_domain(
            QuadratureRule::CompositeGaussLegendre {
                nodes: 16,
                panels: 1,
            },
            1e-4,
        )
        .unwrap();
        let exact = nll_time_integral(&x0, &predictor, &quad, 0, 0, 1).unwrap();
        let mc = nll_time_integral(&x0, &predictor, &quad, 256, 31, 2).unwrap();
        let diff = (mc.mean + mc.truncation_bias_bound.unwrap())
            - (exact.mean + exact.truncation_bias_bound.unwrap());
        assert!(
            diff.abs() <= 6.0 * mc.stderr.max(1e-9),
            "diff {diff}, stderr {}",
            mc.stderr
        );
        let adaptive = QuadratureSpec::lambda_domain(
            QuadratureRule::AdaptiveSimpson { tolerance: 1e-8 },
            1e-4,
        )
        .unwrap();
        assert!(nll_time_integral(&x0, &predictor, &adaptive, 8, 0, 1).is_err());
    }

    #[test]
    fn importance_sampled_integral_matches_the_truncated_target() {
        let d = toy3();
        let predictor = OraclePredictor::new(d);
        let x0 = seq(&[0, 0, 1], 2);
        let quad = QuadratureSpec::lambda_domain(
            QuadratureRule::CompositeGaussLegendre {
                nodes: 64,
                panels: 1,
            },
            1e-4,
        )
        .unwrap();
        let exact = nll_time_integral(&x0, &predictor, &quad, 0, 0, 1).unwrap();
        let est = nll_lambda_importance(&x0, &predictor, 1e-4, 20_000, 13, 1).unwrap();
        assert!(
            (est.mean - exact.mean).abs() <= 4.0 * est.stderr,
            "mean {} vs target {}, stderr {}",
            est.mean,
            exact.mean,
            est.stderr
        );
    }

    #[test]
    fn conditional_with_empty_conditioning_set_reduces_to_the_plain_estimator() {
        let d = toy3();
        let predictor = OraclePredictor::new(d);
        let x0 = seq(&[0, 1, 1], 2);
        let i1 = IndexSet::full(3);
        let i2 = IndexSet::empty(3);
        let plain = nll_time_free(&x0, &predictor, 200, 8, 1).unwrap();
        let cond = conditional_nll_time_free(
            &x0,
            &i1,
            &i2,
            &predictor,
            200,
            8,
            1,
            FreePositionPolicy::Reject,
        )
        .unwrap();
        assert_eq!(plain.mean.to_bits(), cond.mean.to_bits());
    }

    #[test]
    fn conditional_estimate_matches_the_chain_rule_target() {
        let d = toy3();
        let predictor = OraclePredictor::new(d.clone());
        let x = seq(&[0, 0, 1], 2);
        let i1 = IndexSet::from_sorted(vec![1, 2], 3).unwrap();
        let i2 = IndexSet::from_sorted(vec![0], 3).unwrap();
        // −log p(x¹x² | x⁰) = −log p(x) + log p(x⁰ masked elsewhere).
        let joint = d.log_prob(&x).unwrap().finite().unwrap();
        let marginal = d
            .log_marginal_unmasked(&apply_mask(&x, &i2).unwrap())
            .unwrap();
        let target = -(joint - marginal);
        let est = conditional_nll_time_free(
            &x,
            &i1,
            &i2,
            &predictor,
            10_000,
            42,
            1,
            FreePositionPolicy::Reject,
        )
        .unwrap();
        assert!(
            (est.mean - target).abs() <= 4.0 * est.stderr,
            "mean {} vs target {target}, stderr {}",
            est.mean,
            est.stderr
        );
        // Integral route agrees too.
        let quad = QuadratureSpec::lambda_domain(
            QuadratureRule::CompositeGaussLegendre {
                nodes: 32,
                panels: 1,
            },
            1e-4,
        )
        .unwrap();
        let integral = conditional_nll_time_integral(
            &x,
            &i1,
            &i2,
            &predictor,
            &quad,
            0,
            0,
            1,
            FreePositionPolicy::Reject,
        )
        .unwrap();
        assert_abs_diff_eq!(
            integral.mean + integral.truncation_bias_bound.unwrap(),
            target,
            epsilon = 1e-6
        );
    }

    #[test]
    fn single_estimated_position_is_deterministic() {
        let d = toy3();
        let predictor = OraclePredictor::new(d);
        let x = seq(&[0, 0, 1], 2);
        let i1 = IndexSet::from_sorted(vec![2], 3).unwrap();
        let i2 = IndexSet::from_sorted(vec![0, 1], 3).unwrap();
        let est = conditional_nll_time_free(
            &x,
            &i1,
            &i2,
            &predictor,
            16,
            2,
            1,
            FreePositionPolicy::Reject,
        )
        .unwrap();
        assert!(est.stderr < 1e-15);
        // p(x²=1 | x⁰=0, x¹=0) = 1 for toy3 (only atom 001 matches 00·).
        assert_abs_diff_eq!(est.mean, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn conditional_set_validation() {
        let d = toy3();
        let predictor = OraclePredictor::new(d);
        let x = seq(&[0, 0, 1], 2);
        let overlapping = conditional_nll_time_free(
            &x,
            &IndexSet::from_sorted(vec![0, 1], 3).unwrap(),
            &IndexSet::from_sorted(vec![1, 2], 3).unwrap(),
            &predictor,
            8,
            0,
            1,
            FreePositionPolicy::Reject,
        );
        assert!(overlapping.is_err());
        let uncovered = conditional_nll_time_free(
            &x,
            &IndexSet::from_sorted(vec![0], 3).unwrap(),
            &IndexSet::from_sorted(vec![2], 3).unwrap(),
            &predictor,
            8,
            0,
            1,
            FreePositionPolicy::Reject,
        );
        assert!(uncovered.is_err());
        // The marginalizing policy accepts the same sets (oracle mode).
        let marginalized = conditional_nll_time_free(
            &x,
            &IndexSet::from_sorted(vec![0], 3).unwrap(),
            &IndexSet::from_sorted(vec![2], 3).unwrap(),
            &predictor,
            64,
            0,
            1,
            FreePositionPolicy::MarginalizeMasked,
        );
        assert!(marginalized.is_ok());
    }

    #[test]
    fn identical_sequences_have_zero_ratio_and_zero_variance() {
        let d = toy3();
        let predictor = OraclePredictor::new(d);
        let x = seq(&[0, 0, 1], 2);
        let est = ratio_coupled(&x, &x, &predictor, 100, 3, 1).unwrap();
        assert_eq!(est.mean, 0.0);
        assert_eq!(est.variance, 0.0);
    }

    #[test]
    fn coupled_ratio_is_unbiased_and_tighter_than_decoupled() {
        let d = toy3();
        let predictor = OraclePredictor::new(d);
        let x = seq(&[0, 0, 1], 2);
        let y = seq(&[1, 0, 0], 2);
        let target = {
            let ex = exact_subset_sum_nll(&x, &predictor).unwrap().nats;
            let ey = exact_subset_sum_nll(&y, &predictor).unwrap().nats;
            ex - ey // log p(y) − log p(x)
        };
        let coupled = ratio_coupled(&x, &y, &predictor, 4000, 11, 1).unwrap();
        let decoupled = ratio_decoupled(&x, &y, &predictor, 4000, 11, 1).unwrap();
        assert!(
            (coupled.mean - target).abs() <= 4.0 * coupled.stderr,
            "coupled {} vs {target}",
            coupled.mean
        );
        assert!(
            (decoupled.mean - target).abs() <= 4.0 * decoupled.stderr,
            "decoupled {} vs {target}",
            decoupled.mean
        );
        assert!(
            coupled.variance < decoupled.variance,
            "coupled {} !< decoupled {}",
            coupled.variance,
            decoupled.variance
        );
        assert!(ratio_coupled(&x, &seq(&[0, 0], 2), &predictor, 8, 0, 1).is_err());
    }

    #[test]
    fn conditional_ratio_is_zero_for_identical_responses() {
        let d = toy3();
        let predictor = OraclePredictor::new(d);
        let prompt = seq(&[0], 2);
        let resp = seq(&[0, 1], 2);
        let est = ratio_coupled_conditional(&prompt, &resp, &resp, &predictor, 64, 7, 1).unwrap();
        assert_eq!(est.mean, 0.0);
        assert_eq!(est.variance, 0.0);
    }

    #[test]
    fn conditional_ratio_matches_difference_of_conditional_estimates() {
        let d = toy3();
        let predictor = OraclePredictor::new(d.clone());
        let prompt = seq(&[0], 2);
        let resp_x = seq(&[0, 1], 2);
        let resp_y = seq(&[1, 1], 2);
        // Targets from the oracle: −log p(resp | prompt) each.
        let cond_target = |resp: &Sequence| {
            let mut tokens = prompt.tokens().to_vec();
            tokens.extend_from_slice(resp.tokens());
            let full = seq(&tokens, 2);
            let joint = d.log_prob(&full).unwrap().finite().unwrap();
            let keep = IndexSet::from_sorted(vec![0], 3).unwrap();
            let marg = d
                .log_marginal_unmasked(&apply_mask(&full, &keep).unwrap())
                .unwrap();
            -(joint - marg)
        };
        let target = cond_target(&resp_x) - cond_target(&resp_y);
        let est =
            ratio_coupled_conditional(&prompt, &resp_x, &resp_y, &predictor, 6000, 29, 2).unwrap();
        assert!(
            (est.mean - target).abs() <= 4.0 * est.stderr,
            "mean {} vs target {target}, stderr {}",
            est.mean,
            est.stderr
        );
        let decoupled =
            ratio_decoupled_conditional(&prompt, &resp_x, &resp_y, &predictor, 6000, 29, 2)
                .unwrap();
        assert!(
            (decoupled.mean - target).abs() <= 4.0 * decoupled.stderr,
            "decoupled mean {} vs target {target}",
            decoupled.mean
        );
    }

    #[test]
    fn any_order_baseline_agrees_on_single_positions_and_small_toys() {
        let p = 0.3f64;
        let bern = OracleDistribution::Categorical(
            ExplicitCategorical::new(vec![(seq(&[0], 2), p), (seq(&[1], 2), 1.0 - p)]).unwrap(),
        );
        let bp = OraclePredictor::new(bern);
        let ao = nll_ao_autoregressive(&seq(&[0], 2), &bp, 16, 3, 1).unwrap();
        let tf = nll_time_free(&seq(&[0], 2), &bp, 16, 3, 1).unwrap();
        assert_abs_diff_eq!(ao.mean, tf.mean, epsilon = 1e-12);

        let d = toy3();
        let predictor = OraclePredictor::new(d.clone());
        let x0 = seq(&[0, 1, 1], 2);
        let target = -d.log_prob(&x0).unwrap().finite().unwrap();
        let est = nll_ao_autoregressive(&x0, &predictor, 4000, 19, 2).unwrap();
        assert!(
            (est.mean - target).abs() <= 4.0 * est.stderr,
            "mean {} vs target {target}, stderr {}",
            est.mean,
            est.stderr
        );
    }

    #[test]
    fn any_order_expectation_is_exact_under_permutation_enumeration() {
        // L = 4 toy: enumerate all 24 orders by hand with the oracle
        // conditionals; the average equals −log p₀(x₀) exactly.
        let d = OracleDistribution::Categorical(
            ExplicitCategorical::new(vec![
                (seq(&[0, 0, 1, 1], 2), 0.4),
                (seq(&[0, 1, 0, 1], 2), 0.3),
                (seq(&[1, 0, 0, 1], 2), 0.2),
                (seq(&[1, 1, 1, 0], 2), 0.1),
            ])
            .unwrap(),
        );
        let predictor = OraclePredictor::new(d.clone());
        let x0 = seq(&[0, 1, 0, 1], 2);
        let mut orders = Vec::new();
        let mut perm = [0usize, 1, 2, 3];
        permute(&mut perm, 0, &mut orders);
        assert_eq!(orders.len(), 24);
        let mut total = KahanSum::new();
        for order in &orders {
            let mut state = MaskedSequence::fully_masked(4, 2).unwrap();
            for &pos in order {
                let rows = predictor.log_predict(&state).unwrap();
                let (_, row) = rows.iter().find(|&&(i, _)| i == pos).unwrap();
                total.add(-row[usize::from(x0.token(pos))]);
                state = state.with_token(pos, x0.token(pos)).unwrap();
            }
        }
        let average = total.value() / orders.len() as f64;
        let target = -d.log_prob(&x0).unwrap().finite().unwrap();
        assert_abs_diff_eq!(average, target, epsilon = 1e-9);
    }

    fn permute(perm: &mut [usize; 4], k: usize, out: &mut Vec<[usize; 4]>) {
        if k == perm.len() {
            out.push(*perm);
            return;
        }
        for i in k..perm.len() {
            perm.swap(k, i);
            permute(perm, k + 1, out);
            perm.swap(k, i);
        }
    }

    #[test]
    fn exact_order_enumeration_matches_the_subset_sum() {
        let d = OracleDistribution::Categorical(
            ExplicitCategorical::new(vec![
                (seq(&[0, 0, 1, 1], 2), 0.4),
                (seq(&[0, 1, 0, 1], 2), 0.3),
                (seq(&[1, 0, 0, 1], 2), 0.2),
                (seq(&[1, 1, 1, 0], 2), 0.1),
            ])
            .unwrap(),
        );
        let predictor = OraclePredictor::new(d.clone());
        for (tokens, _) in d.enumerate_support().unwrap() {
            let ao = nll_ao_exact(&tokens, &predictor).unwrap();
            let subset = exact_subset_sum_nll(&tokens, &predictor).unwrap();
            assert_abs_diff_eq!(ao.nats, subset.nats, epsilon = 1e-12);
            let truth = -d.log_prob(&tokens).unwrap().finite().unwrap();
            assert_abs_diff_eq!(ao.nats, truth, epsilon = 1e-12);
        }

        let long = seq(&[0, 1, 0, 1, 0, 1, 0, 1, 0], 2);
        assert!(matches!(
            nll_ao_exact(&long, &predictor),
            Err(Error::CapExceeded { .. })
        ));
    }

    #[test]
    fn stratified_estimator_is_consistent_and_tighter() {
        let d = toy3();
        let predictor = OraclePredictor::new(d);
        let x0 = seq(&[0, 0, 1], 2);
        let exact = exact_subset_sum_nll(&x0, &predictor).unwrap().nats;
        let n = 4096;
        let plain = nll_time_free(&x0, &predictor, n, 23, 1).unwrap();
        let strat = nll_time_free_stratified(&x0, &predictor, n, 23, 1).unwrap();
        assert_eq!(strat.n_samples, n);
        assert!(
            (strat.mean - exact).abs() <= 4.0 * strat.stderr.max(1e-12),
            "stratified {} vs exact {exact}, stderr {}",
            strat.mean,
            strat.stderr
        );
        assert!(
            strat.stderr < plain.stderr,
            "stratified stderr {} !< plain {}",
            strat.stderr,
            plain.stderr
        );
        assert!(nll_time_free_stratified(&x0, &predictor, 10, 23, 1).is_err());
    }

    #[test]
    fn stratified_results_are_thread_count_invariant() {
        let d = toy3();
        let predictor = OraclePredictor::new(d);
        let x0 = seq(&[0, 1, 1], 2);
        let a = nll_time_free_stratified(&x0, &predictor, 512, 37, 1).unwrap();
        let b = nll_time_free_stratified(&x0, &predictor, 512, 37, 4).unwrap();
        assert_eq!(a.mean.to_bits(), b.mean.to_bits());
        assert_eq!(a.stderr.to_bits(), b.stderr.to_bits());
    }
}
