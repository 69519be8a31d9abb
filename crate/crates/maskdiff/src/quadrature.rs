//! One-dimensional quadrature: composite Gauss–Legendre rules and an
//! adaptive Simpson fallback.
//!
//! The integrands in this crate (noise-level and time integrals of
//! expected losses) are smooth on the truncated domains they are
//! evaluated on, so fixed Gauss–Legendre nodes converge fast and — unlike
//! adaptive schemes — give a static node/weight list that Monte Carlo
//! per-node evaluation can reuse for variance propagation.

use crate::error::{Error, Result};

/// How an integral is discretized.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum QuadratureRule {
    /// `nodes`-point Gauss–Legendre on each of `panels` equal panels.
    CompositeGaussLegendre { nodes: usize, panels: usize },
    /// Recursive Simpson refinement down to an absolute tolerance.
    AdaptiveSimpson { tolerance: f64 },
}

/// A rule plus the interval it integrates over.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuadratureSpec {
    pub rule: QuadratureRule,
    pub lower: f64,
    pub upper: f64,
}

impl QuadratureSpec {
    /// Noise-level domain `[ε, 1]`; the truncation `ε` must be small
    /// (at most 0.01) so the reported bias bound stays meaningful.
    pub fn lambda_domain(rule: QuadratureRule, eps: f64) -> Result<Self> {
        if !(eps > 0.0 && eps <= 0.01) {
            return Err(Error::InvalidArgument(format!(
                "λ truncation must lie in (0, 0.01], got {eps}"
            )));
        }
        let spec = Self {
            rule,
            lower: eps,
            upper: 1.0,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Time domain `[0, t_max]`.
    pub fn time_domain(rule: QuadratureRule, t_max: f64) -> Result<Self> {
        if !(t_max > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "time horizon must be positive, got {t_max}"
            )));
        }
        let spec = Self {
            rule,
            lower: 0.0,
            upper: t_max,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lower.is_finite() && self.upper.is_finite() && self.lower < self.upper) {
            return Err(Error::InvalidArgument(format!(
                "bad integration interval [{}, {}]",
                self.lower, self.upper
            )));
        }
        match self.rule {
            QuadratureRule::CompositeGaussLegendre { nodes, panels } => {
                if nodes < 8 {
                    return Err(Error::InvalidArgument(format!(
                        "Gauss–Legendre needs at least 8 nodes, got {nodes}"
                    )));
                }
                if panels == 0 {
                    return Err(Error::InvalidArgument("panel count must be ≥ 1".into()));
                }
            }
            QuadratureRule::AdaptiveSimpson { tolerance } => {
                if !(tolerance > 0.0 && tolerance.is_finite()) {
                    return Err(Error::InvalidArgument(format!(
                        "Simpson tolerance must be positive, got {tolerance}"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Explicit node/weight pairs on the interval. Only fixed rules have
    /// them; adaptive Simpson places nodes based on the integrand.
    pub fn nodes(&self) -> Result<Vec<(f64, f64)>> {
        self.validate()?;
        match self.rule {
            QuadratureRule::CompositeGaussLegendre { nodes, panels } => {
                let base = gauss_legendre(nodes);
                let h = (self.upper - self.lower) / panels as f64;
                let mut out = Vec::with_capacity(nodes * panels);
                for p in 0..panels {
                    let a = self.lower + p as f64 * h;
                    for &(x, w) in &base {
                        out.push((a + 0.5 * h * (x + 1.0), 0.5 * h * w));
                    }
                }
                Ok(out)
            }
            QuadratureRule::AdaptiveSimpson { .. } => Err(Error::InvalidArgument(
                "adaptive Simpson has no static node list".into(),
            )),
        }
    }

    /// `∫ f` over the interval with the configured rule.
    pub fn integrate(&self, f: &mut dyn FnMut(f64) -> Result<f64>) -> Result<f64> {
        self.validate()?;
        match self.rule {
            QuadratureRule::CompositeGaussLegendre { .. } => {
                let mut total = crate::numerics::KahanSum::new();
                for (x, w) in self.nodes()? {
                    total.add(w * f(x)?);
                }
                Ok(total.value())
            }
            QuadratureRule::AdaptiveSimpson { tolerance } => {
                adaptive_simpson(f, self.lower, self.upper, tolerance)
            }
        }
    }
}

/// Gauss–Legendre nodes and weights on `[−1, 1]`, by Newton iteration on
/// the Legendre recurrence. Exact (to rounding) for polynomials of degree
/// `2n − 1`.
pub fn gauss_legendre(n: usize) -> Vec<(f64, f64)> {
    assert!(n >= 1, "need at least one node");
    let mut out = Vec::with_capacity(n);
    for k in 0..n.div_ceil(2) {
        // Tricomi-style initial guess for the k-th positive-side root.
        let mut x = (std::f64::consts::PI * (k as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (p, d) = legendre_with_derivative(n, x);
            dp = d;
            let step = p / d;
            x -= step;
            if step.abs() < 1e-15 {
                let (p2, d2) = legendre_with_derivative(n, x);
                dp = d2;
                x -= p2 / d2;
                break;
            }
        }
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        out.push((-x, w));
        if 2 * k + 1 < n {
            out.push((x, w));
        }
    }
    out.sort_by(|a, b| a.0.total_cmp(&b.0));
    out
}

/// `(P_n(x), P_n'(x))` via the three-term recurrence.
fn legendre_with_derivative(n: usize, x: f64) -> (f64, f64) {
    let mut p_prev = 1.0f64;
    let mut p = x;
    if n == 0 {
        return (1.0, 0.0);
    }
    for j in 2..=n {
        let jf = j as f64;
        let p_next = ((2.0 * jf - 1.0) * x * p - (jf - 1.0) * p_prev) / jf;
        p_prev = p;
        p = p_next;
    }
    let d = n as f64 * (x * p - p_prev) / (x * x - 1.0);
    (p, d)
}

/// Adaptive Simpson with the classic Richardson acceptance test.
pub fn adaptive_simpson(
    f: &mut dyn FnMut(f64) -> Result<f64>,
    a: f64,
    b: f64,
    tolerance: f64,
) -> Result<f64> {
    let fa = f(a)?;
    let fb = f(b)?;
    let m = 0.5 * (a + b);
    let fm = f(m)?;
    let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
    simpson_recurse(f, a, b, fa, fm, fb, whole, tolerance, 50)
}

#[allow(clippy::too_many_arguments)]
fn simpson_recurse(
    f: &mut dyn FnMut(f64) -> Result<f64>,
    a: f64,
    b: f64,
    fa: f64,
    fm: f64,
    fb: f64,
    whole: f64,
    tolerance: f64,
    depth: usize,
) -> Result<f64> {
    let m = 0.5 * (a + b);
    let lm = 0.5 * (a + m);
    let rm = 0.5 * (m + b);
    let flm = f(lm)?;
    let frm = f(rm)?;
    let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
    let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
    let delta = left + right - whole;
    if depth == 0 {
        return Err(Error::Domain(format!(
            "Simpson refinement did not converge on [{a}, {b}]"
        )));
    }
    if delta.abs() <= 15.0 * tolerance {
        return Ok(left + right + delta / 15.0);
    }
    let lv = simpson_recurse(f, a, m, fa, flm, fm, left, tolerance / 2.0, depth - 1)?;
    let rv = simpson_recurse(f, m, b, fm, frm, fb, right, tolerance / 2.0, depth - 1)?;
    Ok(lv + rv)
}
