//! Deterministic random streams.
//!
//! Every Monte-Carlo unit (a path, a batch row, a chain) draws from its own
//! ChaCha stream keyed by `(seed, index)`, so results are identical for any
//! thread count or schedule.

use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub type Rng = ChaCha8Rng;

pub fn seeded(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Independent stream `index` under `seed`.
pub fn stream(seed: u64, index: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Draws a fresh base seed from a caller-supplied generator.
pub fn fork(rng: &mut Rng) -> u64 {
    rng.random()
}

pub fn fill_normal(rng: &mut Rng, out: &mut [f64]) {
    for x in out.iter_mut() {
        *x = rng.sample(StandardNormal);
    }
}

pub fn normal_vec(rng: &mut Rng, n: usize) -> Vec<f64> {
    let mut v = vec![0.0; n];
    fill_normal(rng, &mut v);
    v
}

pub fn rademacher_vec(rng: &mut Rng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 })
        .collect()
}

pub fn uniform(rng: &mut Rng) -> f64 {
    rng.random::<f64>()
}
