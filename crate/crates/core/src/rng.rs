//! Seeded stream derivation.
//!
//! Every stochastic component derives its generator from a root seed plus a
//! fixed tag path, so results never depend on iteration order or thread
//! count. ChaCha8 is fast and identical across platforms.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// SplitMix64 finalizer; decorrelates nearby seeds.
#[inline]
pub fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derive an independent stream from `seed` and a tag path.
///
/// `stream(seed, &[a, b])` and `stream(seed, &[a, c])` are decorrelated for
/// `b != c`; the derivation is pure so any worker can rebuild its stream.
pub fn stream(seed: u64, tags: &[u64]) -> ChaCha8Rng {
    let mut state = mix(seed);
    for &t in tags {
        state = mix(state ^ t);
    }
    ChaCha8Rng::seed_from_u64(state)
}

/// Fixed tags for the independent stream families used across the crate.
pub mod tag {
    pub const PHANTOM: u64 = 0x01;
    pub const NOISE: u64 = 0x02;
    pub const INIT_SHARED: u64 = 0x03;
    pub const INIT_NMF: u64 = 0x04;
    pub const TRAIN_STEP: u64 = 0x05;
    pub const FIT_STEP: u64 = 0x06;
    pub const HOLDOUT: u64 = 0x07;
    pub const OPNORM: u64 = 0x08;
    pub const CHUNK: u64 = 0x09;
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn streams_are_reproducible() {
        let mut a = stream(42, &[tag::NOISE, 7]);
        let mut b = stream(42, &[tag::NOISE, 7]);
        for _ in 0..16 {
            assert_eq!(a.gen::<u64>(), b.gen::<u64>());
        }
    }

    #[test]
    fn streams_differ_across_tags() {
        let mut a = stream(42, &[tag::NOISE, 7]);
        let mut b = stream(42, &[tag::NOISE, 8]);
        let va: Vec<u64> = (0..8).map(|_| a.gen()).collect();
        let vb: Vec<u64> = (0..8).map(|_| b.gen()).collect();
        assert_ne!(va, vb);
    }
}
