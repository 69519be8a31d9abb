//! Masked discrete-diffusion losses, exact small-scale oracles, and Monte
//! Carlo likelihood estimators.
//!
//! The crate is organized around three layers:
//!
//! * **Forward process** — noise schedules ([`schedule`]) and token-level
//!   transition kernels ([`kernel`]) for absorbing (masking) and uniform
//!   rate matrices.
//! * **Ground truth** — small exact distributions ([`oracle`]) whose
//!   marginals, conditionals, scores, and information measures are computed
//!   by brute force, used to validate everything else.
//! * **Losses and estimators** — pointwise score-entropy and cross-entropy
//!   losses ([`losses`]), the identities connecting them ([`identities`]),
//!   and Monte Carlo estimators of log-likelihood ([`estimators`]).
//!
//! Numeric kernels are generic over the scalar type via [`real::Real`]
//! (`f32` or `f64`); oracles, estimators, and training fix `f64`.

pub mod datagen;
pub mod error;
pub mod estimators;
pub mod identities;
pub mod kernel;
pub mod losses;
pub mod numerics;
pub mod oracle;
pub mod predictor;
pub mod quadrature;
pub mod real;
pub mod rng;
pub mod schedule;
pub mod train;
pub mod types;

pub use error::{Error, Result};
pub use real::Real;
pub use types::{apply_mask, mask_token, Alphabet, IndexSet, MaskedSequence, Sequence};

/// Constant-rate schedule at the crate's default `f64` precision.
pub type ConstantSchedule = schedule::Constant<f64>;
/// Log-linear schedule at the crate's default `f64` precision.
pub type LogLinearSchedule = schedule::LogLinear<f64>;
