//! Deterministic random streams.
//!
//! Every stream is a ChaCha8 keystream keyed by a 64-bit seed (expanded to
//! the 256-bit ChaCha key by `SeedableRng::seed_from_u64`) and a 64-bit
//! stream id. ChaCha is counter based, so a stream is fully described by
//! `(seed, stream, word_pos)` and reproduces bit-exactly on every platform.
//! Uniform draws use the top 53 bits of a `u64`; normal draws use the
//! ziggurat sampler from `rand_distr`.

use rand::{Rng as _, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

/// Serializable position of an [`Rng`]; enough to resume a stream exactly.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub stream: u64,
    /// Keystream position in 32-bit words, stored as a decimal string
    /// because the value is a `u128`.
    pub word_pos: String128,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct String128(pub u128);

impl Serialize for String128 {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.0.to_string())
    }
}

impl<'de> Deserialize<'de> for String128 {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map(String128).map_err(serde::de::Error::custom)
    }
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self::with_stream(seed, 0)
    }

    fn with_stream(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Rng { seed, inner }
    }

    /// Independent child stream identified by `label`. Does not advance
    /// `self`; the same label always yields the same child.
    pub fn split(&self, label: u64) -> Rng {
        // Mix the parent's stream id so grandchildren differ from children.
        let stream = self
            .inner
            .get_stream()
            .wrapping_mul(0x9E37_79B9_7F4A_7C15)
            .wrapping_add(label.wrapping_add(1));
        Self::with_stream(self.seed, stream)
    }

    pub fn state(&self) -> RngState {
        RngState {
            seed: self.seed,
            stream: self.inner.get_stream(),
            word_pos: String128(self.inner.get_word_pos()),
        }
    }

    pub fn from_state(state: &RngState) -> Rng {
        let mut rng = Self::with_stream(state.seed, state.stream);
        rng.inner.set_word_pos(state.word_pos.0);
        rng
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        (self.inner.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in `[0, n)`.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        self.inner.random_range(0..n)
    }

    pub fn normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }
}
