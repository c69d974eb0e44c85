//! Bounded uniform perturbations and keyed random streams.
//!
//! Every draw in a Monte Carlo run comes from a ChaCha stream whose 256-bit
//! seed is the tuple `(master seed, trial, channel, iteration)`. Streams never
//! share state, so scheduling order cannot change any draw.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Closed interval `[lo, hi]` of relative perturbations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 2]", into = "[f64; 2]")]
pub struct UniformBounds {
    pub lo: f64,
    pub hi: f64,
}

impl UniformBounds {
    pub const ZERO: UniformBounds = UniformBounds { lo: 0.0, hi: 0.0 };

    pub fn new(lo: f64, hi: f64) -> Self {
        assert!(lo <= hi, "uniform bounds require lo <= hi, got [{lo}, {hi}]");
        UniformBounds { lo, hi }
    }

    /// Symmetric bounds `[-half_width, half_width]`.
    pub fn symmetric(half_width: f64) -> Self {
        Self::new(-half_width.abs(), half_width.abs())
    }

    pub fn is_zero(&self) -> bool {
        self.lo == 0.0 && self.hi == 0.0
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> f64 {
        if self.lo == self.hi {
            self.lo
        } else {
            rng.random_range(self.lo..=self.hi)
        }
    }
}

impl TryFrom<[f64; 2]> for UniformBounds {
    type Error = String;

    fn try_from([lo, hi]: [f64; 2]) -> Result<Self, Self::Error> {
        if lo <= hi {
            Ok(UniformBounds { lo, hi })
        } else {
            Err(format!("bounds [{lo}, {hi}] have lower above upper"))
        }
    }
}

impl From<UniformBounds> for [f64; 2] {
    fn from(b: UniformBounds) -> Self {
        [b.lo, b.hi]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Channel {
    Load = 1,
    Measurement = 2,
    Sensitivity = 3,
    Sampling = 4,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StreamKey {
    pub master: u64,
    pub trial: u64,
    pub channel: Channel,
    pub iteration: u64,
}

impl StreamKey {
    pub fn new(master: u64, trial: u64, channel: Channel, iteration: u64) -> Self {
        StreamKey { master, trial, channel, iteration }
    }

    pub fn rng(&self) -> ChaCha8Rng {
        let mut seed = [0u8; 32];
        for (chunk, word) in
            seed.chunks_exact_mut(8).zip([self.master, self.trial, self.channel as u64, self.iteration])
        {
            chunk.copy_from_slice(&word.to_le_bytes());
        }
        ChaCha8Rng::from_seed(seed)
    }
}
