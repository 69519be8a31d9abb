//! Pointwise score-entropy and masked cross-entropy losses, their exact
//! expectations under the forward process, and the prefactor transform
//! connecting them.
//!
//! The score-entropy loss at state `x` sums, over the single-token
//! neighbor moves `y` the forward process can undo, the Bregman-type term
//! `Q_t(x,y)·[s(x)_y − r·ln s(x)_y + K(r)]` with `K(a) = a(ln a − 1)` and
//! `r` the conditional transition ratio `p_{t|0}(y|x₀)/p_{t|0}(x|x₀)`.
//! Each term is nonnegative and vanishes exactly at `s = r`.
//!
//! The masked cross-entropy loss sums `−ln c(x)_{i,x₀ⁱ}` over masked
//! positions. For the absorbing (masking) process the two losses are the
//! same object up to the factor `σ(t)(1−λ)/λ`: the per-neighbor sum
//! telescopes because the conditional ratio is supported on the single
//! true token. The prefactor uses the instantaneous rate σ(t) — the form
//! required for the substitution dλ = σ(t)(1−λ)dt to hold; writing the
//! integrated rate there instead does not survive the change of variables.

use crate::error::{Error, Result};
use crate::kernel::{transition_at_sigma_bar, TokenRateMatrix};
use crate::numerics::KahanSum;
use crate::oracle::OracleDistribution;
use crate::predictor::ConditionalPredictor;
use crate::schedule::NoiseSchedule;
use crate::types::{mask_token, MaskedSequence, Sequence};

/// Floor applied to predictor probabilities before taking logs; learned
/// predictors can underflow to exact zeros.
pub const PROBABILITY_FLOOR: f64 = 1e-12;

/// Sequence length above which exact 2^L pattern expectations are refused.
pub const EXPECTATION_PATTERN_CAP: usize = crate::oracle::PATTERN_ENUMERATION_CAP;

/// Largest `N^L` state space enumerated for uniform-kernel expectations.
pub const UNIFORM_STATE_CAP: u128 = 4096;

/// `K(a) = a(ln a − 1)`, with `K(0) = 0` by continuity.
pub fn k_fn(a: f64) -> Result<f64> {
    if !(a >= 0.0) {
        return Err(Error::Domain(format!("K is defined on a ≥ 0, got {a}")));
    }
    if a == 0.0 {
        return Ok(0.0);
    }
    Ok(a * (a.ln() - 1.0))
}

/// One neighbor's contribution to the score-entropy loss:
/// `rate·[s − r·ln s + K(r)]`, evaluated in the grouped form
/// `rate·[(s − r) + r·(ln r − ln s)]` which is exactly zero at `s = r`
/// and immune to the cancellation of the three-term form.
pub fn dse_neighbor_term(rate: f64, ratio: f64, score: f64) -> Result<f64> {
    if score < 0.0 || (score == 0.0 && ratio > 0.0) {
        return Err(Error::InvalidScore { score });
    }
    if ratio == 0.0 {
        return Ok(rate * score);
    }
    Ok(rate * ((score - ratio) + ratio * (ratio.ln() - score.ln())))
}

/// One neighbor move `(position, value)` with its loss components.
#[derive(Debug, Clone)]
pub struct DseNeighborTerm {
    pub position: usize,
    pub value: u16,
    /// `Q_t(x, y)` — rate of the forward jump this move undoes.
    pub rate: f64,
    /// Score estimate `s(x)_y`.
    pub score: f64,
    /// Conditional transition ratio `r`.
    pub ratio: f64,
    /// `rate·[s − r·ln s + K(r)]` in the stable grouped form.
    pub contribution: f64,
}

/// Score-entropy loss at one state: per-neighbor terms and their sum.
#[derive(Debug, Clone)]
pub struct DseLossTerms {
    pub terms: Vec<DseNeighborTerm>,
    pub total: f64,
}

/// Masked cross-entropy at one state: per-position terms, their sum, and
/// how many predictor probabilities hit the floor.
#[derive(Debug, Clone)]
pub struct DceLossValue {
    pub per_position: Vec<(usize, f64)>,
    pub total: f64,
    pub clamp_count: usize,
}

/// Score-entropy loss under the absorbing (masking) kernel.
///
/// The neighbor moves at a masked state are the unmask moves `(i, v)` at
/// masked positions; each carries rate σ(t) and conditional ratio
/// `((1−λ)/λ)·𝟙[v = x₀ⁱ]`. `score(i, v)` supplies `s(x)_{i,v}`.
pub fn dse_pointwise_absorbing<S: NoiseSchedule<f64>>(
    x0: &Sequence,
    x: &MaskedSequence,
    t: f64,
    schedule: &S,
    score: impl Fn(usize, u16) -> Result<f64>,
) -> Result<DseLossTerms> {
    if !x.consistent_with(x0) {
        return Err(Error::InvalidArgument(
            "state is unreachable from the clean sequence".into(),
        ));
    }
    let lambda = schedule.lambda(t);
    if !(lambda > 0.0 && lambda < 1.0) {
        return Err(Error::Domain(format!(
            "absorbing score-entropy needs λ ∈ (0, 1), got λ = {lambda}"
        )));
    }
    let rate = schedule.sigma(t);
    // Log-domain ratio, exponentiated once.
    let unmask_ratio = ((1.0 - lambda).ln() - lambda.ln()).exp();
    let mut terms = Vec::new();
    let mut total = KahanSum::new();
    for i in x.masked_indices() {
        for v in 0..x.alphabet_size() {
            let ratio = if v == x0.token(i) { unmask_ratio } else { 0.0 };
            let s = score(i, v)?;
            let contribution = dse_neighbor_term(rate, ratio, s)?;
            total.add(contribution);
            terms.push(DseNeighborTerm {
                position: i,
                value: v,
                rate,
                score: s,
                ratio,
                contribution,
            });
        }
    }
    Ok(DseLossTerms {
        terms,
        total: total.value(),
    })
}

/// Score-entropy loss under the uniform kernel.
///
/// Neighbor moves flip one position to a different token, each with rate
/// σ(t)/N; the conditional ratio divides single-token transition kernels.
pub fn dse_pointwise_uniform<S: NoiseSchedule<f64>>(
    x0: &Sequence,
    x: &Sequence,
    t: f64,
    schedule: &S,
    score: impl Fn(usize, u16) -> Result<f64>,
) -> Result<DseLossTerms> {
    if x.len() != x0.len() || x.alphabet_size() != x0.alphabet_size() {
        return Err(Error::InvalidArgument("state/clean shape mismatch".into()));
    }
    let n = x.alphabet_size();
    let q = TokenRateMatrix::Uniform { n };
    let sigma_bar = schedule.sigma_bar(t);
    let rate = schedule.sigma(t) / f64::from(n);
    let mut terms = Vec::new();
    let mut total = KahanSum::new();
    for i in 0..x.len() {
        let kernel_row: Vec<f64> = transition_at_sigma_bar(&q, sigma_bar, x0.token(i));
        let denom = kernel_row[usize::from(x.token(i))];
        if denom == 0.0 {
            return Err(Error::ZeroDenominator);
        }
        let log_denom = denom.ln();
        for v in 0..n {
            if v == x.token(i) {
                continue;
            }
            let num = kernel_row[usize::from(v)];
            let ratio = if num == 0.0 {
                0.0
            } else {
                (num.ln() - log_denom).exp()
            };
            let s = score(i, v)?;
            let contribution = dse_neighbor_term(rate, ratio, s)?;
            total.add(contribution);
            terms.push(DseNeighborTerm {
                position: i,
                value: v,
                rate,
                score: s,
                ratio,
                contribution,
            });
        }
    }
    Ok(DseLossTerms {
        terms,
        total: total.value(),
    })
}

/// Masked cross-entropy `Σ_{masked i} −ln c(x)_{i, x₀ⁱ}` with the
/// probability floor applied and counted.
pub fn dce_pointwise(
    x0: &Sequence,
    x: &MaskedSequence,
    c: &dyn ConditionalPredictor,
) -> Result<DceLossValue> {
    if !x.consistent_with(x0) {
        return Err(Error::InvalidArgument(
            "masked state disagrees with the clean sequence".into(),
        ));
    }
    let log_floor = PROBABILITY_FLOOR.ln();
    let mut per_position = Vec::new();
    let mut total = KahanSum::new();
    let mut clamp_count = 0usize;
    for (i, log_row) in c.log_predict(x)? {
        let mut log_c = log_row[usize::from(x0.token(i))];
        if log_c < log_floor {
            log_c = log_floor;
            clamp_count += 1;
        }
        per_position.push((i, -log_c));
        total.add(-log_c);
    }
    Ok(DceLossValue {
        per_position,
        total: total.value(),
        clamp_count,
    })
}

/// Visits every mask pattern of `x0` with its probability under the
/// forward process at level `λ`, skipping zero-probability patterns.
fn for_each_pattern<F: FnMut(&MaskedSequence, f64) -> Result<()>>(
    x0: &Sequence,
    lambda: f64,
    mut visit: F,
) -> Result<()> {
    let l = x0.len();
    if l > EXPECTATION_PATTERN_CAP {
        return Err(Error::CapExceeded {
            what: "mask-pattern expectation",
            needed: 1u128 << l,
            cap: 1u128 << EXPECTATION_PATTERN_CAP,
        });
    }
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Domain(format!("mask level {lambda} outside [0, 1]")));
    }
    let n = x0.alphabet_size();
    let mask = mask_token(n);
    for pattern in 0u32..(1u32 << l) {
        let m = pattern.count_ones() as usize;
        let weight =
            crate::kernel::log_mask_pattern_probability(m, l - m, lambda).exp();
        if weight == 0.0 {
            continue;
        }
        let tokens: Vec<u16> = (0..l)
            .map(|i| {
                if pattern & (1 << i) != 0 {
                    mask
                } else {
                    x0.token(i)
                }
            })
            .collect();
        visit(&MaskedSequence::new(tokens, n)?, weight)?;
    }
    Ok(())
}

/// Exact `E_{p_{λ|0}}[ℓ_DCE(x₀, x_λ, c*)]` with the oracle conditional
/// predictor, by enumerating all 2^L mask patterns.
pub fn mdce_exact(d: &OracleDistribution, x0: &Sequence, lambda: f64) -> Result<f64> {
    let mut total = KahanSum::new();
    for_each_pattern(x0, lambda, |x, weight| {
        let mut state_loss = KahanSum::new();
        for (i, cond) in d.masked_conditionals(x)? {
            state_loss.add(-cond[usize::from(x0.token(i))].ln());
        }
        total.add(weight * state_loss.value());
        Ok(())
    })?;
    Ok(total.value())
}

/// Exact `E_{p_{λ|0}}[ℓ_DCE(x₀, x_λ, c)]` for an arbitrary predictor
/// (floored as in [`dce_pointwise`]); returns the expectation and the
/// total clamp count across patterns.
pub fn expected_dce_loss(
    x0: &Sequence,
    lambda: f64,
    c: &dyn ConditionalPredictor,
) -> Result<(f64, usize)> {
    let mut total = KahanSum::new();
    let mut clamps = 0usize;
    for_each_pattern(x0, lambda, |x, weight| {
        let value = dce_pointwise(x0, x, c)?;
        clamps += value.clamp_count;
        total.add(weight * value.total);
        Ok(())
    })?;
    Ok((total.value(), clamps))
}

/// Exact absorbing-kernel `E_{p_{t|0}}[ℓ_DSE(x₀, x_t, t, s)]` for an
/// arbitrary score function `s(x, i, v)`.
pub fn expected_dse_absorbing<S: NoiseSchedule<f64>>(
    x0: &Sequence,
    t: f64,
    schedule: &S,
    score: &dyn Fn(&MaskedSequence, usize, u16) -> Result<f64>,
) -> Result<f64> {
    let lambda = schedule.lambda(t);
    let mut total = KahanSum::new();
    for_each_pattern(x0, lambda, |x, weight| {
        let loss = dse_pointwise_absorbing(x0, x, t, schedule, |i, v| score(x, i, v))?;
        total.add(weight * loss.total);
        Ok(())
    })?;
    Ok(total.value())
}

/// Exact uniform-kernel `E_{p_{t|0}}[ℓ_DSE(x₀, x_t, t, s)]` over the full
/// `N^L` state space.
pub fn expected_dse_uniform<S: NoiseSchedule<f64>>(
    x0: &Sequence,
    t: f64,
    schedule: &S,
    score: &dyn Fn(&Sequence, usize, u16) -> Result<f64>,
) -> Result<f64> {
    let n = x0.alphabet_size();
    let l = x0.len();
    let states = (u128::from(n)).checked_pow(l as u32).unwrap_or(u128::MAX);
    if states > UNIFORM_STATE_CAP {
        return Err(Error::CapExceeded {
            what: "uniform-kernel state expectation",
            needed: states,
            cap: UNIFORM_STATE_CAP,
        });
    }
    let q = TokenRateMatrix::Uniform { n };
    let sigma_bar = schedule.sigma_bar(t);
    let kernel_rows: Vec<Vec<f64>> = (0..n)
        .map(|x0i| transition_at_sigma_bar(&q, sigma_bar, x0i))
        .collect();
    let mut total = KahanSum::new();
    let mut tokens = vec![0u16; l];
    loop {
        let weight: f64 = tokens
            .iter()
            .enumerate()
            .map(|(i, &v)| kernel_rows[usize::from(x0.token(i))][usize::from(v)])
            .product();
        if weight > 0.0 {
            let x = Sequence::new(tokens.clone(), n)?;
            let loss = dse_pointwise_uniform(x0, &x, t, schedule, |i, v| score(&x, i, v))?;
            total.add(weight * loss.total);
        }
        let mut pos = l;
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
    Ok(total.value())
}

/// Exact `E_{p_{t|0}}[ℓ_DSE(x₀, x_t, t, s*)]` with the true score, for
/// either kernel.
pub fn mdse_exact<S: NoiseSchedule<f64>>(
    d: &OracleDistribution,
    x0: &Sequence,
    t: f64,
    q: &TokenRateMatrix,
    schedule: &S,
) -> Result<f64> {
    match q {
        TokenRateMatrix::Absorbing { .. } => {
            let lambda = schedule.lambda(t);
            let prefactor = (1.0 - lambda) / lambda;
            expected_dse_absorbing(x0, t, schedule, &|x, i, v| {
                let cond = d.conditional(x, i)?;
                Ok(prefactor * cond[usize::from(v)])
            })
        }
        TokenRateMatrix::Uniform { .. } => {
            let sigma_bar = schedule.sigma_bar(t);
            expected_dse_uniform(x0, t, schedule, &|x, i, v| {
                let px = d.diffused_marginal_uniform(x, sigma_bar)?;
                if px == 0.0 {
                    return Err(Error::ZeroDenominator);
                }
                let mut flipped = x.tokens().to_vec();
                flipped[i] = v;
                let py = d
                    .diffused_marginal_uniform(&Sequence::new(flipped, x.alphabet_size())?, sigma_bar)?;
                Ok(py / px)
            })
        }
    }
}

/// Converts a masked cross-entropy value into the equivalent score-entropy
/// value: multiply by `σ(t)·(1−λ(t))/λ(t)`.
pub fn dse_from_dce<S: NoiseSchedule<f64>>(dce: f64, t: f64, schedule: &S) -> Result<f64> {
    let lambda = schedule.lambda(t);
    if lambda == 0.0 {
        return Err(Error::Domain(
            "equivalence prefactor is singular at λ = 0".into(),
        ));
    }
    Ok(schedule.sigma(t) * (1.0 - lambda) / lambda * dce)
}
