//! Deterministic random-number plumbing.
//!
//! Everything stochastic in the crate draws from ChaCha8 streams derived
//! from a single `u64` seed. Independent units of work (Monte Carlo
//! samples, training steps, dataset draws) get their own counter-indexed
//! stream, so results are bit-reproducible regardless of how work is
//! scheduled across threads.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Root generator for a seed.
pub fn root(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Independent stream `stream` under `seed`.
///
/// Streams with different indices never overlap; the mapping is stable
/// across platforms and releases (documented bit-stream contract).
pub fn substream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// One standard-normal draw via Box–Muller (two uniform draws consumed).
pub fn standard_normal<G: rand::Rng>(rng: &mut G) -> f64 {
    let u1: f64 = 1.0 - rng.random::<f64>(); // (0, 1], keeps the log finite
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}
