//! Seeded randomness. Every random draw in the toolkit flows through a
//! [`SeededRng`] substream, so a single 64-bit seed pins training and
//! evaluation exactly.
//!
//! The generator is ChaCha8 (fixed algorithm, identical output on every
//! platform). Substream seeds mix the base seed with an FNV-1a hash of the
//! stream name: `substream_seed = seed XOR fnv1a64(name)`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Stream = ChaCha8Rng;

#[derive(Clone, Copy, Debug)]
pub struct SeededRng {
    pub seed: u64,
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        SeededRng { seed }
    }

    /// Derives the named substream. Same `(seed, name)` always yields the
    /// same sequence.
    pub fn stream(&self, name: &str) -> Stream {
        ChaCha8Rng::seed_from_u64(self.seed ^ fnv1a64(name.as_bytes()))
    }
}

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x100000001b3);
    }
    hash
}

/// Standard normal draw via Box-Muller; two uniforms per call keeps the
/// stream consumption rate fixed.
pub fn normal(rng: &mut impl Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen::<f64>();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_and_name_reproduces() {
        let mut a = SeededRng::new(42).stream("augment");
        let mut b = SeededRng::new(42).stream("augment");
        for _ in 0..100 {
            assert_eq!(a.gen::<u64>(), b.gen::<u64>());
        }
    }

    #[test]
    fn different_names_diverge() {
        let mut a = SeededRng::new(42).stream("augment");
        let mut b = SeededRng::new(42).stream("crop");
        let same = (0..1000)
            .filter(|_| a.gen::<u64>() == b.gen::<u64>())
            .count();
        assert_eq!(same, 0);
    }

    #[test]
    fn matches_frozen_golden_value() {
        // reference value generated once and committed; a change here means
        // the stream derivation broke and old seeds no longer reproduce
        let golden = include_str!("../golden/rng_reference.txt");
        let want: u64 = golden
            .split("first_u64=")
            .nth(1)
            .and_then(|s| s.trim().parse().ok())
            .expect("golden file format");
        let mut s = SeededRng::new(0).stream("augment");
        assert_eq!(s.gen::<u64>(), want);
    }

    #[test]
    fn normal_draws_are_finite_and_centered() {
        let mut rng = SeededRng::new(0).stream("init");
        let n = 10_000;
        let mean: f64 = (0..n).map(|_| normal(&mut rng)).sum::<f64>() / n as f64;
        assert!(mean.abs() < 0.05, "mean {mean}");
    }
}
