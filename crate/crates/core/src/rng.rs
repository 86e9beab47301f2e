//! Seeded pseudo-randomness for the whole engine.
//!
//! Every random draw anywhere in the crate comes from [`SplitMix64`]
//! (Steele, Lea & Flood 2014), chosen because the update is four integer
//! operations and can be traced by hand when a test needs a reference
//! sequence. Purpose-specific streams are derived from one master seed via
//! [`stream`], so weight init, shuffling, augmentation and baseline channel
//! selection never share state.

use std::cmp::Ordering;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

/// Labels for derived random streams. The numeric value participates in
/// stream derivation and is therefore part of the reproducibility contract.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StreamTag {
    Init = 1,
    Shuffle = 2,
    Augment = 3,
    Synth = 4,
    Select = 5,
}

/// SplitMix64 generator.
///
/// `next_u64` advances the state by the golden-ratio increment and applies
/// the standard two-round xor-shift-multiply finalizer:
///
/// ```text
/// state += 0x9E3779B97F4A7C15
/// z = state
/// z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9
/// z = (z ^ (z >> 27)) * 0x94D049BB133111EB
/// return z ^ (z >> 31)
/// ```
#[derive(Debug, Clone)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        SplitMix64 { state: seed }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GOLDEN);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// Uniform in [0, 1) with 53 bits of precision.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform draw in [0, n). Plain modulo reduction: the bias for the
    /// n << 2^64 values used here is negligible and the draw stays
    /// hand-traceable.
    pub fn bounded(&mut self, n: u64) -> u64 {
        assert!(n > 0, "bounded(0)");
        self.next_u64() % n
    }

    /// Standard normal via Box-Muller. Consumes exactly two uniforms per
    /// call; the sine branch is discarded so the draw count per sample is
    /// fixed.
    pub fn normal(&mut self) -> f64 {
        let u1 = self.next_f64().max(f64::MIN_POSITIVE);
        let u2 = self.next_f64();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// Uniform in [lo, hi).
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }
}

/// Derive an independent stream from a master seed, a purpose tag and a
/// lane index (layer id, epoch number, ...).
///
/// The derived state is `mix(master ^ (tag * GOLDEN) ^ mix(lane))` where
/// `mix` is one SplitMix64 step; distinct (tag, lane) pairs give unrelated
/// sequences for the same master seed.
pub fn stream(master: u64, tag: StreamTag, lane: u64) -> SplitMix64 {
    let mut pre = SplitMix64::new(lane);
    let lane_mixed = pre.next_u64();
    let mut seeder = SplitMix64::new(master ^ (tag as u64).wrapping_mul(GOLDEN) ^ lane_mixed);
    SplitMix64::new(seeder.next_u64())
}

/// Fisher-Yates permutation of 0..n, iterating i from n-1 down to 1 and
/// swapping with `bounded(i + 1)`.
pub fn permutation(rng: &mut SplitMix64, n: usize) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.bounded((i + 1) as u64) as usize;
        p.swap(i, j);
    }
    p
}

/// Sample `count` distinct items from `pool` (uniform, order of first pick
/// preserved in the result). Used by the random baseline selection
/// strategies.
pub fn sample_without_replacement(
    rng: &mut SplitMix64,
    pool: &[usize],
    count: usize,
) -> Vec<usize> {
    assert!(count <= pool.len(), "sample larger than pool");
    let mut scratch: Vec<usize> = pool.to_vec();
    let mut picked = Vec::with_capacity(count);
    for _ in 0..count {
        let j = rng.bounded(scratch.len() as u64) as usize;
        picked.push(scratch.swap_remove(j));
    }
    picked
}

/// Total order on floats for deterministic sorts of accumulated values.
pub fn total_cmp_f64(a: f64, b: f64) -> Ordering {
    a.total_cmp(&b)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn splitmix_reference_sequence() {
        // First three outputs for seed 1234567, cross-checked against an
        // independent Python transcription of the reference algorithm.
        let mut rng = SplitMix64::new(1234567);
        assert_eq!(rng.next_u64(), 0x599ed017fb08fc85);
        assert_eq!(rng.next_u64(), 0x2c73f08458540fa5);
        assert_eq!(rng.next_u64(), 0x883ebce5a3f27c77);
    }

    #[test]
    fn same_seed_same_sequence() {
        let mut a = SplitMix64::new(42);
        let mut b = SplitMix64::new(42);
        for _ in 0..100 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn streams_are_independent() {
        let mut a = stream(7, StreamTag::Init, 0);
        let mut b = stream(7, StreamTag::Shuffle, 0);
        let mut c = stream(7, StreamTag::Init, 1);
        let (x, y, z) = (a.next_u64(), b.next_u64(), c.next_u64());
        assert_ne!(x, y);
        assert_ne!(x, z);
        assert_ne!(y, z);
    }

    #[test]
    fn permutation_is_a_permutation() {
        let mut rng = SplitMix64::new(99);
        let p = permutation(&mut rng, 257);
        let mut seen = vec![false; 257];
        for &i in &p {
            assert!(!seen[i]);
            seen[i] = true;
        }
    }

    #[test]
    fn sample_without_replacement_distinct() {
        let mut rng = SplitMix64::new(5);
        let pool: Vec<usize> = (10..30).collect();
        let got = sample_without_replacement(&mut rng, &pool, 7);
        assert_eq!(got.len(), 7);
        let mut sorted = got.clone();
        sorted.sort_unstable();
        sorted.dedup();
        assert_eq!(sorted.len(), 7);
        for &g in &got {
            assert!(pool.contains(&g));
        }
    }

    #[test]
    fn normal_moments_sane() {
        let mut rng = SplitMix64::new(12);
        let n = 20000;
        let mut sum = 0.0;
        let mut sq = 0.0;
        for _ in 0..n {
            let v = rng.normal();
            sum += v;
            sq += v * v;
        }
        let mean = sum / n as f64;
        let var = sq / n as f64 - mean * mean;
        assert!(mean.abs() < 0.03, "mean {mean}");
        assert!((var - 1.0).abs() < 0.05, "var {var}");
    }
}
