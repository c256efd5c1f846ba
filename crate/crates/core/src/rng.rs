//! Seeded random streams. Every stochastic step in the lab (synthetic data,
//! parameter init, batch order, triple subsampling) draws from this
//! xorshift generator so runs replay bit-for-bit across platforms.

use rand::{Rng, SeedableRng};
use rand_distr::StandardNormal;
use rand_xorshift::XorShiftRng;

pub type LabRng = XorShiftRng;

pub fn seeded(seed: u64) -> LabRng {
    XorShiftRng::seed_from_u64(seed)
}

/// Derives an independent stream from a base seed and a purpose tag.
pub fn derived(seed: u64, stream: u64) -> LabRng {
    seeded(seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

pub fn gaussian(rng: &mut LabRng) -> f64 {
    rng.sample(StandardNormal)
}

pub fn gaussian_vec(rng: &mut LabRng, n: usize, std: f64) -> Vec<f64> {
    (0..n).map(|_| std * gaussian(rng)).collect()
}
