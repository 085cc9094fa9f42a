//! Seeded random streams.
//!
//! Every stochastic step (masking, dropout, noise, shuffling, initialization)
//! draws from a ChaCha8 generator whose seed is derived from the run seed and a
//! list of stream tags (epoch, batch, sample index, ...). ChaCha8 output is
//! specified bit-exactly, so identical seeds give identical streams on every
//! platform, and independent tags give independent streams.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub type StetRng = ChaCha8Rng;

pub const ALGORITHM: &str = "chacha8";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
}

impl RngState {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    pub fn algorithm(&self) -> &'static str {
        ALGORITHM
    }

    /// A generator for the sub-stream identified by `tags`.
    pub fn stream(&self, tags: &[u64]) -> StetRng {
        ChaCha8Rng::seed_from_u64(derive_seed(self.seed, tags))
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive_seed(seed: u64, tags: &[u64]) -> u64 {
    tags.iter()
        .fold(splitmix64(seed), |acc, &t| splitmix64(acc ^ splitmix64(t)))
}

/// Stream tags used across the crate, kept distinct so streams never collide.
pub mod tag {
    pub const INIT: u64 = 1;
    pub const SHUFFLE: u64 = 2;
    pub const MASK: u64 = 3;
    pub const DROPOUT: u64 = 4;
    pub const NOISE: u64 = 5;
    pub const SPLIT: u64 = 6;
    pub const SYNTH: u64 = 7;
}
