//! Seed derivation. Every random draw in the crate comes from a ChaCha8
//! stream addressed by `(root seed, stream id)`, so independent consumers
//! never share state and results do not depend on call order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Well-known stream ids. Sub-streams (per seed index, per shard) are added
/// on top of these.
pub mod streams {
    pub const ABELIAN_INIT: u64 = 1 << 32;
    pub const PARTICLE_INIT: u64 = 2 << 32;
    pub const MONTE_CARLO: u64 = 3 << 32;
    pub const MEASURES: u64 = 4 << 32;
    pub const SUBSAMPLE: u64 = 5 << 32;
    pub const CALIBRATION: u64 = 6 << 32;
    pub const MAXENT: u64 = 7 << 32;
    pub const SPECTRUM: u64 = 8 << 32;
}

pub fn stream(root_seed: u64, stream_id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(root_seed);
    rng.set_stream(stream_id);
    rng
}

pub fn standard_normal<R: rand::Rng + ?Sized>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

pub fn normal_vec<R: rand::Rng + ?Sized>(rng: &mut R, len: usize) -> Vec<f64> {
    (0..len).map(|_| standard_normal(rng)).collect()
}
