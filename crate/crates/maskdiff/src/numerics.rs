//! Compensated summation and log-domain reductions shared by the oracles
//! and estimators.

/// Kahan–Babuška (Neumaier) compensated sum.
///
/// Error stays O(ε) independent of length, which matters when thousands of
/// probabilities spanning several orders of magnitude are accumulated.
#[derive(Debug, Clone, Copy, Default)]
pub struct KahanSum {
    sum: f64,
    compensation: f64,
}

impl KahanSum {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, value: f64) {
        let t = self.sum + value;
        if self.sum.abs() >= value.abs() {
            self.compensation += (self.sum - t) + value;
        } else {
            self.compensation += (value - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn value(&self) -> f64 {
        self.sum + self.compensation
    }
}

/// Compensated sum of a slice.
pub fn kahan_sum(values: &[f64]) -> f64 {
    let mut acc = KahanSum::new();
    for &v in values {
        acc.add(v);
    }
    acc.value()
}

/// `ln Σ exp(vᵢ)` with the max factored out and a compensated inner sum.
///
/// Returns `−∞` for an empty slice or when every term is `−∞`.
pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        // Either empty, all −∞ (sum is zero), or a +∞/NaN poisoned input;
        // max itself is the correct propagation in each case.
        return max;
    }
    let mut acc = KahanSum::new();
    for &v in values {
        acc.add((v - max).exp());
    }
    max + acc.value().ln()
}

/// Streaming log-sum-exp for accumulations too large to collect.
#[derive(Debug, Clone, Copy)]
pub struct LogSumExp {
    max: f64,
    sum: KahanSum,
}

impl Default for LogSumExp {
    fn default() -> Self {
        Self {
            max: f64::NEG_INFINITY,
            sum: KahanSum::new(),
        }
    }
}

impl LogSumExp {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, log_value: f64) {
        if log_value == f64::NEG_INFINITY {
            return;
        }
        if log_value > self.max {
            // Rescale the running sum to the new maximum.
            if self.max.is_finite() {
                let scale = (self.max - log_value).exp();
                let mut rescaled = KahanSum::new();
                rescaled.add(self.sum.value() * scale);
                self.sum = rescaled;
            }
            self.max = log_value;
        }
        self.sum.add((log_value - self.max).exp());
    }

    pub fn value(&self) -> f64 {
        if self.max == f64::NEG_INFINITY {
            f64::NEG_INFINITY
        } else {
            self.max + self.sum.value().ln()
        }
    }
}
