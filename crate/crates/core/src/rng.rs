//! Counter-based splittable pseudorandom generator.
//!
//! Every random decision in the workspace (weight init, batch sampling, data
//! synthesis, DARE masks) draws from a stream addressed by a key, and keys are
//! derived from a root seed plus a chain of `(label, index)` pairs. Streams
//! are stateless functions of `(key, counter)`, so any draw can be reproduced
//! without replaying the ones before it, and sibling streams do not interact
//! no matter how many values each consumes.
//!
//! The block function is the SplitMix64 output chain: the value at counter
//! `i` (1-based) is `mix64(key + i * GOLDEN)`, which makes a stream with key
//! `k` emit exactly the reference SplitMix64 sequence seeded with `k`.

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;
const DERIVE_SALT: u64 = 0xA0761D6478BD642F;

/// SplitMix64 finalizer (Stafford variant 13).
#[inline]
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// FNV-1a 64-bit hash, used to fold stream labels into key material.
#[inline]
fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h = 0xCBF2_9CE4_8422_2325u64;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x1000_0000_01B3);
    }
    h
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Rng {
    key: u64,
    counter: u64,
}

impl Rng {
    /// Root stream for a seed. The key is the seed itself, so the root stream
    /// reproduces the published SplitMix64 sequence for that seed.
    pub fn from_seed(seed: u64) -> Self {
        Rng {
            key: seed,
            counter: 0,
        }
    }

    pub fn key(&self) -> u64 {
        self.key
    }

    /// Child stream addressed by `(label, index)`. Derivation touches only
    /// the key, never this stream's counter, so deriving commutes with
    /// drawing and siblings are independent of each other's consumption.
    pub fn derive(&self, label: &str, index: u64) -> Rng {
        let tag = fnv1a64(label.as_bytes())
            .wrapping_add(GOLDEN.wrapping_mul(index))
            ^ DERIVE_SALT;
        Rng {
            key: mix64(self.key ^ mix64(tag)),
            counter: 0,
        }
    }

    /// Value at 0-based position `i` of this stream, independent of the
    /// current counter.
    pub fn at(&self, i: u64) -> u64 {
        mix64(
            self.key
                .wrapping_add(i.wrapping_add(1).wrapping_mul(GOLDEN)),
        )
    }

    pub fn next_u64(&mut self) -> u64 {
        self.counter = self.counter.wrapping_add(1);
        mix64(self.key.wrapping_add(self.counter.wrapping_mul(GOLDEN)))
    }

    /// Uniform in [0, 1) with 53 bits of precision.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in [0, n) without modulo bias.
    pub fn next_below(&mut self, n: u64) -> u64 {
        assert!(n > 0, "next_below(0)");
        let zone = u64::MAX - (u64::MAX % n);
        loop {
            let v = self.next_u64();
            if v < zone {
                return v % n;
            }
        }
    }

    /// Standard normal via Box-Muller. Draws two uniforms per sample.
    pub fn next_normal(&mut self) -> f64 {
        let u1 = self.next_f64();
        let u2 = self.next_f64();
        (-2.0 * (1.0 - u1).ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }

    pub fn fill_normal(&mut self, out: &mut [f32], std: f32) {
        for v in out.iter_mut() {
            *v = (self.next_normal() as f32) * std;
        }
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.next_below((i + 1) as u64) as usize;
            items.swap(i, j);
        }
    }

    /// Sample from a categorical distribution given unnormalized weights.
    pub fn next_categorical(&mut self, weights: &[f64]) -> usize {
        let total: f64 = weights.iter().sum();
        debug_assert!(total > 0.0);
        let mut r = self.next_f64() * total;
        for (i, &w) in weights.iter().enumerate() {
            r -= w;
            if r < 0.0 {
                return i;
            }
        }
        weights.len() - 1
    }
}
