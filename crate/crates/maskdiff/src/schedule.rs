//! Noise schedules: the corruption intensity `σ(t)`, its integral `σ̄(t)`,
//! and the mask-level coordinate `λ(t) = 1 − e^{−σ̄(t)}`.
//!
//! `λ` is the canonical coordinate for masked diffusion — most identities
//! and estimators are stated directly in `λ` — so schedules matter only for
//! the time-side (score-entropy) checks. Two schedules are provided:
//!
//! * [`Constant`]: `σ(t) = σ`, so `σ̄(t) = σ·t` on `t ∈ [0, ∞)`.
//! * [`LogLinear`]: `σ̄(t) = −ln(1 − (1−ε)t)` on `t ∈ [0, 1]`, which makes
//!   `λ(t) = (1−ε)·t` exactly linear in `t`. `λ` sweeps `[0, 1−ε]`,
//!   honouring `σ̄(0) = 0` while keeping `σ(1)` finite.

use crate::real::Real;

/// The `σ(t), σ̄(t), λ(t)` triple plus the inverse map `t(λ)`.
///
/// Implementations guarantee `σ(t) > 0` for `t > 0`, `σ̄` strictly
/// increasing with `σ̄(0) = 0`, and `λ` strictly increasing in `[0, 1)`.
pub trait NoiseSchedule<R: Real>: Send + Sync {
    /// Instantaneous corruption rate `σ(t)`. Requires `t ≥ 0` and `t`
    /// within the schedule's domain.
    fn sigma(&self, t: R) -> R;

    /// Integrated rate `σ̄(t) = ∫₀ᵗ σ(s) ds`.
    fn sigma_bar(&self, t: R) -> R;

    /// Mask level `λ(t) = 1 − e^{−σ̄(t)}`.
    fn lambda(&self, t: R) -> R {
        R::one() - (-self.sigma_bar(t)).exp()
    }

    /// Inverse of [`NoiseSchedule::lambda`]: the `t` with `λ(t) = lam`.
    fn t_of_lambda(&self, lam: R) -> R;

    /// End of the valid `t` domain (`∞` for unbounded schedules).
    fn t_end(&self) -> R;
}

/// Constant-rate schedule `σ(t) = σ`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Constant<R> {
    sigma: R,
}

impl<R: Real> Constant<R> {
    /// Requires `σ > 0`.
    pub fn new(sigma: R) -> Self {
        assert!(sigma > R::zero(), "sigma must be positive");
        Self { sigma }
    }

    pub fn rate(&self) -> R {
        self.sigma
    }
}

impl<R: Real> Default for Constant<R> {
    fn default() -> Self {
        Self::new(R::one())
    }
}

impl<R: Real> NoiseSchedule<R> for Constant<R> {
    fn sigma(&self, _t: R) -> R {
        self.sigma
    }

    fn sigma_bar(&self, t: R) -> R {
        debug_assert!(t >= R::zero());
        self.sigma * t
    }

    fn t_of_lambda(&self, lam: R) -> R {
        debug_assert!(lam >= R::zero() && lam < R::one());
        // t = −ln(1−λ)/σ; ln_1p form keeps precision near λ = 0.
        -(-lam).ln_1p() / self.sigma
    }

    fn t_end(&self) -> R {
        R::infinity()
    }
}

/// Schedule with `λ(t) = (1−ε)·t` exactly linear on `t ∈ [0, 1]`.
///
/// Equivalently `σ̄(t) = −ln(1 − (1−ε)t)` and
/// `σ(t) = (1−ε)/(1 − (1−ε)t)`, so the rate diverges as `λ → 1` but stays
/// finite on the domain (`σ(1) = (1−ε)/ε`).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogLinear<R> {
    eps: R,
}

impl<R: Real> LogLinear<R> {
    /// Requires `ε ∈ (0, 1)`; `ε` is the distance `1 − λ(1)` kept away
    /// from the fully-masked endpoint.
    pub fn new(eps: R) -> Self {
        assert!(
            eps > R::zero() && eps < R::one(),
            "eps must lie strictly inside (0, 1)"
        );
        Self { eps }
    }

    pub fn eps(&self) -> R {
        self.eps
    }
}

impl<R: Real> Default for LogLinear<R> {
    fn default() -> Self {
        Self::new(R::from_f64_lossy(1e-3))
    }
}

impl<R: Real> NoiseSchedule<R> for LogLinear<R> {
    fn sigma(&self, t: R) -> R {
        debug_assert!(t >= R::zero() && t <= R::one());
        let slope = R::one() - self.eps;
        slope / (R::one() - slope * t)
    }

    fn sigma_bar(&self, t: R) -> R {
        debug_assert!(t >= R::zero() && t <= R::one());
        let slope = R::one() - self.eps;
        -(-(slope * t)).ln_1p()
    }

    fn lambda(&self, t: R) -> R {
        (R::one() - self.eps) * t
    }

    fn t_of_lambda(&self, lam: R) -> R {
        debug_assert!(lam >= R::zero() && lam <= R::one() - self.eps);
        lam / (R::one() - self.eps)
    }

    fn t_end(&self) -> R {
        R::one()
    }
}
