//! Scalar abstraction for the numeric kernels.
//!
//! Schedules, pointwise losses, and quadrature are generic over [`Real`] so
//! they can run in `f32` or `f64`; the enumeration oracles, estimators, and
//! the training loop are fixed to `f64`, where accumulation error actually
//! matters. Concrete `f64` aliases live at the crate root.

use num_traits::{Float, FromPrimitive};

/// Floating-point scalar usable by the generic numeric kernels.
pub trait Real: Float + FromPrimitive + std::fmt::Debug + std::fmt::Display + Send + Sync + 'static {
    /// Lossy conversion from `f64`, for constants inside generic code.
    fn from_f64_lossy(v: f64) -> Self {
        <Self as FromPrimitive>::from_f64(v).expect("finite f64 converts to any Real")
    }

    /// Widening conversion into `f64` for reporting.
    fn into_f64(self) -> f64;
}

impl Real for f32 {
    fn into_f64(self) -> f64 {
        f64::from(self)
    }
}

impl Real for f64 {
    fn into_f64(self) -> f64 {
        self
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conversions_roundtrip_for_representable_values() {
        assert_eq!(f32::from_f64_lossy(0.5), 0.5f32);
        assert_eq!(f64::from_f64_lossy(0.1), 0.1f64);
        assert_eq!(0.25f32.into_f64(), 0.25f64);
    }
}
