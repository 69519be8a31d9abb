//! Token-level forward transition kernels for the absorbing and uniform
//! rate matrices, with a matrix-exponential oracle validating the closed
//! forms.
//!
//! Rate matrices use the column-acting convention of the forward equation
//! `dp_t/dt = Q_t p_t`: entry `Q[y][x]` is the jump rate from state `x`
//! into state `y`, and every *column* sums to zero. The time-dependent
//! generator factors as `Q_t = σ(t)·Q`, so transition kernels depend on
//! time only through `σ̄(t)`.

use crate::error::{Error, Result};
use crate::real::Real;
use crate::schedule::NoiseSchedule;
use crate::types::{mask_token, MaskedSequence, Sequence};
use rand::Rng;

/// Unit-scale token rate matrix (`Q_t = σ(t)·Q`).
///
/// * `Absorbing`: states `0..N` plus the mask state `N`; every clean token
///   jumps to the mask at rate 1 and the mask is absorbing.
/// * `Uniform`: states `0..N`; `Q = (1/N)(𝟙𝟙ᵀ − N·Id)`, normalized so the
///   spectral gap is 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenRateMatrix {
    Absorbing { n: u16 },
    Uniform { n: u16 },
}

impl TokenRateMatrix {
    /// Alphabet size `N`.
    pub fn n(&self) -> u16 {
        match *self {
            TokenRateMatrix::Absorbing { n } | TokenRateMatrix::Uniform { n } => n,
        }
    }

    /// State-space dimension: `N+1` for absorbing (mask included), `N` for
    /// uniform.
    pub fn dim(&self) -> usize {
        match *self {
            TokenRateMatrix::Absorbing { n } => usize::from(n) + 1,
            TokenRateMatrix::Uniform { n } => usize::from(n),
        }
    }

    /// Column-acting entry `Q[to][from]` at unit time scale.
    pub fn base_rate(&self, to: usize, from: usize) -> f64 {
        let dim = self.dim();
        assert!(to < dim && from < dim, "state index out of range");
        match *self {
            TokenRateMatrix::Absorbing { n } => {
                let mask = usize::from(n);
                if from == mask {
                    0.0 // mask is absorbing
                } else if to == mask {
                    1.0
                } else if to == from {
                    -1.0
                } else {
                    0.0
                }
            }
            TokenRateMatrix::Uniform { n } => {
                let n = f64::from(n);
                if to == from {
                    (1.0 - n) / n
                } else {
                    1.0 / n
                }
            }
        }
    }

    /// Dense copy of `Q` for the matrix-exponential oracle.
    pub fn dense(&self) -> Vec<Vec<f64>> {
        let d = self.dim();
        (0..d)
            .map(|to| (0..d).map(|from| self.base_rate(to, from)).collect())
            .collect()
    }
}

/// Closed-form token transition `p_{t|0}(· | x0) = exp(σ̄(t)·Q)_{·,x0}`.
///
/// Returns a probability vector over the kernel's state space (`N+1`
/// entries for absorbing with the mask last, `N` for uniform).
pub fn token_transition<R: Real, S: NoiseSchedule<R>>(
    q: &TokenRateMatrix,
    schedule: &S,
    t: R,
    x0: u16,
) -> Result<Vec<R>> {
    if t < R::zero() {
        return Err(Error::Domain(format!("negative time {t}")));
    }
    if x0 >= q.n() {
        return Err(Error::InvalidArgument(format!(
            "clean token {x0} out of range for alphabet size {}",
            q.n()
        )));
    }
    let sigma_bar = schedule.sigma_bar(t);
    Ok(transition_at_sigma_bar(q, sigma_bar, x0))
}

/// The same kernel parameterized directly by `σ̄ ≥ 0`.
pub fn transition_at_sigma_bar<R: Real>(q: &TokenRateMatrix, sigma_bar: R, x0: u16) -> Vec<R> {
    debug_assert!(sigma_bar >= R::zero());
    let decay = (-sigma_bar).exp();
    match *q {
        TokenRateMatrix::Absorbing { n } => {
            // Stay put with probability e^{−σ̄} = 1−λ, absorb into the mask
            // with probability λ.
            let mut row = vec![R::zero(); usize::from(n) + 1];
            row[usize::from(x0)] = decay;
            row[usize::from(n)] = R::one() - decay;
            row
        }
        TokenRateMatrix::Uniform { n } => {
            // exp(σ̄(Π − I)) = e^{−σ̄}·I + (1 − e^{−σ̄})·Π with Π the
            // projection onto the uniform distribution.
            let nn = R::from_f64_lossy(f64::from(n));
            let other = (R::one() - decay) / nn;
            let mut row = vec![other; usize::from(n)];
            row[usize::from(x0)] = other + decay;
            row
        }
    }
}

/// Brute-force `exp(s·A)` by scaling-and-squaring with a Taylor series.
///
/// Validation oracle for the closed-form kernels; intended for the small
/// dense matrices of this crate, not general use.
pub fn matrix_exp(a: &[Vec<f64>], s: f64) -> Vec<Vec<f64>> {
    let d = a.len();
    let norm: f64 = a
        .iter()
        .map(|row| row.iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max)
        * s.abs();
    let squarings = if norm > 0.5 {
        (norm / 0.5).log2().ceil() as u32
    } else {
        0
    };
    let scale = s / f64::powi(2.0, squarings as i32);

    // Taylor series of exp(scale·A) to machine precision.
    let mut result = identity(d);
    let mut term = identity(d);
    for k in 1..=40 {
        term = mat_mul(&term, a);
        for row in term.iter_mut() {
            for v in row.iter_mut() {
                *v *= scale / k as f64;
            }
        }
        let mut biggest = 0.0f64;
        for (rr, rt) in result.iter_mut().zip(&term) {
            for (vr, vt) in rr.iter_mut().zip(rt) {
                *vr += vt;
                biggest = biggest.max(vt.abs());
            }
        }
        if biggest < 1e-18 {
            break;
        }
    }
    for _ in 0..squarings {
        result = mat_mul(&result, &result);
    }
    result
}

fn identity(d: usize) -> Vec<Vec<f64>> {
    (0..d)
        .map(|i| (0..d).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
        .collect()
}

fn mat_mul(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let d = a.len();
    let mut out = vec![vec![0.0; d]; d];
    for i in 0..d {
        for k in 0..d {
            let aik = a[i][k];
            if aik == 0.0 {
                continue;
            }
            for j in 0..d {
                out[i][j] += aik * b[k][j];
            }
        }
    }
    out
}

/// Corrupts `x0` by masking each token independently with probability `λ`.
///
/// Exactly one RNG draw per token, so the stream layout is stable.
pub fn sample_forward<G: Rng>(x0: &Sequence, lambda: f64, rng: &mut G) -> Result<MaskedSequence> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Domain(format!("mask level {lambda} outside [0, 1]")));
    }
    let n = x0.alphabet_size();
    let tokens = x0
        .tokens()
        .iter()
        .map(|&tok| {
            if rng.random::<f64>() < lambda {
                mask_token(n)
            } else {
                tok
            }
        })
        .collect();
    MaskedSequence::new(tokens, n)
}

/// Probability of observing mask pattern `x` from clean `x0` at level `λ`.
///
/// Returns `(probability, consistent)`; an unmasked token disagreeing with
/// `x0` yields probability zero with `consistent = false` rather than an
/// error, because such queries legitimately arise when scanning patterns.
pub fn mask_pattern_probability(
    x: &MaskedSequence,
    x0: &Sequence,
    lambda: f64,
) -> (f64, bool) {
    if !x.consistent_with(x0) {
        return (0.0, false);
    }
    let masked = x.masked_count() as i32;
    let unmasked = (x.len() - x.masked_count()) as i32;
    (
        lambda.powi(masked) * (1.0 - lambda).powi(unmasked),
        true,
    )
}

/// Log-domain version of [`mask_pattern_probability`] for long sequences.
pub fn log_mask_pattern_probability(masked: usize, unmasked: usize, lambda: f64) -> f64 {
    let log_lam = if masked == 0 { 0.0 } else { lambda.ln() * masked as f64 };
    let log_keep = if unmasked == 0 {
        0.0
    } else {
        (1.0 - lambda).ln() * unmasked as f64
    };
    log_lam + log_keep
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::{Constant, LogLinear};
    use approx::assert_abs_diff_eq;

    #[test]
    fn absorbing_at_zero_time_stays_put() {
        let q = TokenRateMatrix::Absorbing { n: 4 };
        let p = token_transition(&q, &Constant::new(1.0f64), 0.0, 2).unwrap();
        assert_eq!(p, vec![0.0, 0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn absorbing_at_sigma_bar_ln2_is_half_half() {
        let q = TokenRateMatrix::Absorbing { n: 4 };
        let p = transition_at_sigma_bar(&q, std::f64::consts::LN_2, 1u16);
        assert_abs_diff_eq!(p[1], 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(p[4], 0.5, epsilon = 1e-15);
    }

    #[test]
    fn uniform_converges_to_stationary() {
        let q = TokenRateMatrix::Uniform { n: 4 };
        let p = transition_at_sigma_bar(&q, 60.0f64, 3u16);
        for &v in &p {
            assert_abs_diff_eq!(v, 0.25, epsilon = 1e-12);
        }
    }

    #[test]
    fn negative_time_is_a_domain_error() {
        let q = TokenRateMatrix::Uniform { n: 3 };
        assert!(matches!(
            token_transition(&q, &Constant::new(1.0f64), -0.1, 0),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn kernels_are_probability_vectors_on_a_grid() {
        for q in [
            TokenRateMatrix::Absorbing { n: 5 },
            TokenRateMatrix::Uniform { n: 5 },
        ] {
            for i in 0..=50 {
                let sb = i as f64 * 0.2;
                for x0 in 0..5u16 {
                    let p = transition_at_sigma_bar(&q, sb, x0);
                    let sum: f64 = p.iter().sum();
                    assert!(p.iter().all(|&v| v >= 0.0));
                    assert_abs_diff_eq!(sum, 1.0, epsilon = 1e-12);
                }
            }
        }
    }

    #[test]
    fn rate_matrix_columns_sum_to_zero() {
        for q in [
            TokenRateMatrix::Absorbing { n: 4 },
            TokenRateMatrix::Uniform { n: 4 },
        ] {
            let dense = q.dense();
            let d = q.dim();
            for from in 0..d {
                let col: f64 = (0..d).map(|to| dense[to][from]).sum();
                assert_abs_diff_eq!(col, 0.0, epsilon = 1e-15);
                for to in 0..d {
                    if to != from {
                        assert!(dense[to][from] >= 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn closed_forms_match_matrix_exponential() {
        for q in [
            TokenRateMatrix::Absorbing { n: 3 },
            TokenRateMatrix::Uniform { n: 3 },
        ] {
            let dense = q.dense();
            for &sb in &[0.0, 0.05, 0.7, 2.3, 9.0] {
                let exp = matrix_exp(&dense, sb);
                for x0 in 0..3u16 {
                    let closed = transition_at_sigma_bar(&q, sb, x0);
                    for (to, &c) in closed.iter().enumerate() {
                        assert_abs_diff_eq!(c, exp[to][usize::from(x0)], epsilon = 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn chapman_kolmogorov_on_uniform_kernel() {
        let q = TokenRateMatrix::Uniform { n: 3 };
        let (s1, s2) = (0.4f64, 1.1f64);
        // exp(σ̄₂ Q) = exp((σ̄₂−σ̄₁) Q) · exp(σ̄₁ Q)
        for x0 in 0..3u16 {
            let via_one = transition_at_sigma_bar(&q, s2, x0);
            let first = transition_at_sigma_bar(&q, s1, x0);
            let mut composed = vec![0.0f64; 3];
            for (mid, &p_mid) in first.iter().enumerate() {
                let second = transition_at_sigma_bar(&q, s2 - s1, mid as u16);
                for (to, &p_to) in second.iter().enumerate() {
                    composed[to] += p_mid * p_to;
                }
            }
            for (a, b) in via_one.iter().zip(&composed) {
                assert_abs_diff_eq!(a, b, epsilon = 1e-10);
            }
        }
    }

    #[test]
    fn sample_forward_edge_levels() {
        let x0 = Sequence::new(vec![0, 1, 2, 3], 4).unwrap();
        let mut rng = crate::rng::substream(1, 0);
        let clean = sample_forward(&x0, 0.0, &mut rng).unwrap();
        assert_eq!(clean.masked_count(), 0);
        let blank = sample_forward(&x0, 1.0, &mut rng).unwrap();
        assert_eq!(blank.masked_count(), 4);
        assert!(sample_forward(&x0, 1.5, &mut rng).is_err());
    }

    #[test]
    fn sample_forward_mask_fraction_matches_lambda() {
        let x0 = Sequence::new(vec![0, 1, 2, 3, 0, 1, 2, 3], 4).unwrap();
        let mut rng = crate::rng::substream(42, 0);
        let draws = 100_000;
        let mut total_masked = 0usize;
        for _ in 0..draws {
            total_masked += sample_forward(&x0, 0.5, &mut rng).unwrap().masked_count();
        }
        let mean = total_masked as f64 / draws as f64;
        // Per-draw variance is L·λ(1−λ) = 2, so 3σ of the mean ≈ 0.0134.
        let three_sigma = 3.0 * (2.0f64 / draws as f64).sqrt();
        assert!((mean - 4.0).abs() < three_sigma, "mean {mean}");
    }

    #[test]
    fn pattern_probability_products() {
        let x0 = Sequence::new(vec![0, 1], 2).unwrap();
        let keep_all = crate::types::apply_mask(&x0, &crate::types::IndexSet::full(2)).unwrap();
        assert_abs_diff_eq!(
            mask_pattern_probability(&keep_all, &x0, 0.3).0,
            0.49,
            epsilon = 1e-15
        );
        let blank = MaskedSequence::fully_masked(2, 2).unwrap();
        assert_abs_diff_eq!(
            mask_pattern_probability(&blank, &x0, 0.3).0,
            0.09,
            epsilon = 1e-15
        );
        let one = crate::types::apply_mask(
            &x0,
            &crate::types::IndexSet::from_sorted(vec![0], 2).unwrap(),
        )
        .unwrap();
        assert_abs_diff_eq!(
            mask_pattern_probability(&one, &x0, 0.5).0,
            0.25,
            epsilon = 1e-15
        );
    }

    #[test]
    fn inconsistent_pattern_gets_zero_with_flag() {
        let x0 = Sequence::new(vec![0, 1], 2).unwrap();
        let wrong = MaskedSequence::new(vec![1, 1], 2).unwrap();
        let (p, ok) = mask_pattern_probability(&wrong, &x0, 0.4);
        assert_eq!(p, 0.0);
        assert!(!ok);
    }

    #[test]
    fn log_pattern_probability_matches_linear_domain() {
        let (m, u, lam) = (3usize, 5usize, 0.37f64);
        let direct = lam.powi(3) * (1.0 - lam).powi(5);
        assert_abs_diff_eq!(
            log_mask_pattern_probability(m, u, lam).exp(),
            direct,
            epsilon = 1e-15
        );
        // λ endpoints stay finite when the corresponding count is zero.
        assert_eq!(log_mask_pattern_probability(0, 4, 0.0), 0.0);
        assert_eq!(log_mask_pattern_probability(4, 0, 1.0), 0.0);
    }

    #[test]
    fn sample_forward_draw_distribution_matches_kernel() {
        // Empirical per-token mask rate vs the absorbing closed form, at a
        // level strictly inside (0, 1).
        let sched = LogLinear::new(1e-3f64);
        let t = 0.62;
        let lam: f64 = sched.lambda(t);
        let x0 = Sequence::new(vec![2; 16], 4).unwrap();
        let mut rng = crate::rng::substream(9, 3);
        let draws = 50_000;
        let mut masked = 0usize;
        for _ in 0..draws {
            masked += sample_forward(&x0, lam, &mut rng).unwrap().masked_count();
        }
        let rate = masked as f64 / (draws * 16) as f64;
        let sd = (lam * (1.0 - lam) / (draws * 16) as f64).sqrt();
        assert!((rate - lam).abs() < 4.0 * sd, "rate {rate} vs λ {lam}");
    }
}
