//! Counter-based SplitMix64 streams.
//!
//! Draw `i` (0-based) of the stream with key `k` is `mix64(k + (i + 1) · γ)` with
//! `γ = 0x9E37_79B9_7F4A_7C15` and `mix64` the SplitMix64 finalizer. A stream key is
//! derived from `(seed, stream, tag)` by nesting `mix64`, so every subject owns an
//! independent stream and generation order does not affect the draws.
//! Uniforms are `((u >> 11) + 0.5) · 2⁻⁵³`; normals are the inverse normal CDF of
//! a uniform.

use crate::inference::normal_quantile;

const GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn stream_key(seed: u64, stream: u64, tag: u64) -> u64 {
    mix64(mix64(mix64(seed).wrapping_add(stream.wrapping_mul(GAMMA))) ^ tag.wrapping_mul(0xD1B5_4A32_D192_ED03))
}

#[derive(Debug, Clone)]
pub struct CounterRng {
    key: u64,
    counter: u64,
}

impl CounterRng {
    pub fn new(key: u64) -> Self {
        Self { key, counter: 0 }
    }

    pub fn for_stream(seed: u64, stream: u64, tag: u64) -> Self {
        Self::new(stream_key(seed, stream, tag))
    }

    /// Draw at an absolute position, independent of the cursor.
    pub fn at(&self, index: u64) -> u64 {
        mix64(self.key.wrapping_add(index.wrapping_add(1).wrapping_mul(GAMMA)))
    }

    pub fn next_u64(&mut self) -> u64 {
        let v = self.at(self.counter);
        self.counter += 1;
        v
    }

    /// Uniform on the open interval (0, 1).
    pub fn uniform(&mut self) -> f64 {
        ((self.next_u64() >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64)
    }

    pub fn normal(&mut self) -> f64 {
        normal_quantile(self.uniform())
    }
}
