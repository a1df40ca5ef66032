//! Seeded, splittable random number generation.
//!
//! Every stochastic choice in the system (init, dropout, augmentation, toy
//! data) draws from a `StreamRng` derived from a base seed and a label, so a
//! training run is a pure function of its seed.

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

/// A deterministic random stream. Child streams are derived by hashing a
/// label into the parent seed, so unrelated consumers never share state.
pub struct StreamRng {
    seed: u64,
    rng: ChaCha8Rng,
}

fn mix(seed: u64, label: &str) -> u64 {
    // FNV-1a over the label, folded into the seed.
    let mut h: u64 = 0xcbf29ce484222325 ^ seed.wrapping_mul(0x9e3779b97f4a7c15);
    for b in label.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

impl StreamRng {
    pub fn new(seed: u64) -> Self {
        StreamRng {
            seed,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Base seed this stream was created from.
    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Derive an independent child stream from a label.
    pub fn child(&self, label: &str) -> StreamRng {
        StreamRng::new(mix(self.seed, label))
    }

    /// Derive an independent child stream from a label and an index
    /// (e.g. an iteration counter).
    pub fn child_indexed(&self, label: &str, index: u64) -> StreamRng {
        StreamRng::new(mix(self.seed, label) ^ index.wrapping_mul(0xd1342543de82ef95))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    /// Uniform in [0, 1).
    pub fn uniform(&mut self) -> f64 {
        (self.rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in [lo, hi).
    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in [0, n).
    pub fn below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        (self.next_u64() % n as u64) as usize
    }

    /// Standard normal via Box-Muller.
    pub fn normal(&mut self) -> f64 {
        let u1 = (self.uniform() + f64::MIN_POSITIVE).min(1.0 - f64::EPSILON);
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }
}
