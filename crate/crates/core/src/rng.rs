//! Deterministic random numbers.
//!
//! Everything stochastic in the crate draws from [`Rng`], a thin wrapper
//! around the ChaCha8 stream cipher from `rand_chacha`. ChaCha has a
//! platform-independent output stream, so one seed reproduces the same
//! bits on any machine, and its (seed, word position) pair is enough to
//! resume the stream exactly after a checkpoint round trip.
//!
//! Floats and bounded integers are derived from raw 64-bit draws here
//! rather than through the `rand` distribution layer, so their bit
//! patterns do not depend on a third-party version bump.

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};
use serde::{Deserialize, Serialize};

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[derive(Debug, Clone)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

/// Serializable snapshot of a generator: the seed it was built from and
/// how far into the stream it has advanced.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct RngState {
    pub seed: u64,
    pub word_pos_lo: u64,
    pub word_pos_hi: u64,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Spawns an independent generator for a named sub-stream. The child
    /// seed mixes the parent seed with the tag through SplitMix64, so
    /// distinct tags give uncorrelated streams and the derivation is
    /// stable across runs.
    pub fn derive(&self, tag: u64) -> Rng {
        Rng::new(splitmix64(self.seed ^ splitmix64(tag)))
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform f64 in [0, 1) with 53 random mantissa bits.
    pub fn f64(&mut self) -> f64 {
        const SCALE: f64 = 1.0 / (1u64 << 53) as f64;
        (self.next_u64() >> 11) as f64 * SCALE
    }

    /// Uniform f64 in [lo, hi).
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.f64()
    }

    /// Uniform integer in [0, n), n > 0. Uses rejection sampling on the
    /// top of the 64-bit range, so every value is exactly equally likely.
    pub fn below(&mut self, n: u64) -> u64 {
        assert!(n > 0, "below(0) is undefined");
        let zone = u64::MAX - (u64::MAX % n);
        loop {
            let v = self.next_u64();
            if v < zone {
                return v % n;
            }
        }
    }

    /// Weighted index draw over non-negative weights summing to `total`.
    pub fn weighted(&mut self, weights: &[f64], total: f64) -> usize {
        let mut r = self.f64() * total;
        for (i, w) in weights.iter().enumerate() {
            r -= w;
            if r < 0.0 {
                return i;
            }
        }
        weights.len() - 1
    }

    pub fn state(&self) -> RngState {
        let pos = self.inner.get_word_pos();
        RngState {
            seed: self.seed,
            word_pos_lo: pos as u64,
            word_pos_hi: (pos >> 64) as u64,
        }
    }

    pub fn restore(state: &RngState) -> Rng {
        let mut rng = Rng::new(state.seed);
        let pos = (state.word_pos_hi as u128) << 64 | state.word_pos_lo as u128;
        rng.inner.set_word_pos(pos);
        rng
    }
}
