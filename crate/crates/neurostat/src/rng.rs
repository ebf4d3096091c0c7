//! Seed derivation and normal sampling.
//!
//! Every stochastic component draws from a ChaCha stream derived from
//! `(master seed, domain, index)`. Units of work (sets, epochs, episodes)
//! get their own streams, so generating them in parallel or serially, or in
//! any batch grouping, yields bit-identical draws.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Domain tags keeping unrelated consumers of the same master seed apart.
pub mod domains {
    pub const MODEL_INIT: u64 = 0x4d4f_4445;
    pub const SYNTHETIC_DATA: u64 = 0x5359_4e54;
    pub const SPATIAL_DATA: u64 = 0x5350_4154;
    pub const TRAIN_SHUFFLE: u64 = 0x5348_5546;
    pub const TRAIN_NOISE: u64 = 0x4e4f_4953;
    pub const EVAL_NOISE: u64 = 0x4556_414c;
    pub const EPISODE: u64 = 0x4550_4953;
    pub const GENERATE: u64 = 0x4745_4e45;
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// An independent RNG for work unit `index` within `domain`.
pub fn stream_rng(seed: u64, domain: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(seed ^ splitmix64(domain)));
    rng.set_stream(index);
    rng
}

/// Fills `out` with standard-normal draws (Box–Muller, pairwise).
pub fn fill_standard_normal(rng: &mut impl Rng, out: &mut [f64]) {
    let mut i = 0;
    while i < out.len() {
        let (z0, z1) = normal_pair(rng);
        out[i] = z0;
        if i + 1 < out.len() {
            out[i + 1] = z1;
        }
        i += 2;
    }
}

/// One standard-normal draw. Consumes a full Box–Muller pair so the stream
/// layout matches `fill_standard_normal` on a length-1 slice.
pub fn standard_normal(rng: &mut impl Rng) -> f64 {
    normal_pair(rng).0
}

fn normal_pair(rng: &mut impl Rng) -> (f64, f64) {
    // 1 - u keeps the argument of ln strictly positive.
    let u1: f64 = 1.0 - rng.gen::<f64>();
    let u2: f64 = rng.gen();
    let r = (-2.0 * u1.ln()).sqrt();
    let theta = 2.0 * std::f64::consts::PI * u2;
    (r * theta.cos(), r * theta.sin())
}
