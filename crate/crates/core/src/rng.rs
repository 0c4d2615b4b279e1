//! Counter-addressable Gaussian noise.
//!
//! Every random number in a run is a pure function of
//! `(seed, role, particle, step)`. The `(seed, role)` pair is hashed with
//! SHA-256 into a ChaCha8 key; the particle index selects the ChaCha stream
//! and each step consumes a fixed number of 32-bit words, so any step can
//! be reached with `set_word_pos`. Reading a stream sequentially and
//! seeking to a step give identical values, independent of thread count.

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Domain-separation prefix for key derivation.
const KEY_PREFIX: &[u8] = b"mvdelay/noise/v1";

/// `SHA-256(prefix ‖ seed_le ‖ role)`.
pub fn derive_key(seed: u64, role: &str) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(KEY_PREFIX);
    h.update(seed.to_le_bytes());
    h.update(role.as_bytes());
    let digest = h.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    key
}

/// A family of per-particle Gaussian streams sharing one key.
#[derive(Debug, Clone)]
pub struct NoiseSource {
    key: [u8; 32],
    dim: usize,
}

impl NoiseSource {
    pub fn new(seed: u64, role: &str, dim: usize) -> Self {
        Self { key: derive_key(seed, role), dim }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// 32-bit words consumed per step: two `u64` per Box–Muller pair.
    fn words_per_step(&self) -> u128 {
        (self.dim.div_ceil(2) * 4) as u128
    }

    /// Stream for `particle`, positioned at step 0.
    pub fn stream(&self, particle: u64) -> NoiseStream {
        let mut rng = ChaCha8Rng::from_seed(self.key);
        rng.set_stream(particle);
        NoiseStream { rng, dim: self.dim }
    }

    pub fn stream_at(&self, particle: u64, step: u64) -> NoiseStream {
        let mut s = self.stream(particle);
        s.rng.set_word_pos(step as u128 * self.words_per_step());
        s
    }

    /// Standard normals of `(particle, step)` by direct addressing.
    pub fn normals_at(&self, particle: u64, step: u64) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        self.stream_at(particle, step).next_normals(&mut out);
        out
    }
}

#[derive(Debug, Clone)]
pub struct NoiseStream {
    rng: ChaCha8Rng,
    dim: usize,
}

impl NoiseStream {
    fn uniform_open(&mut self) -> f64 {
        // (0, 1]: never zero, so the logarithm below is finite.
        ((self.rng.next_u64() >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Two independent standard normals (Box–Muller).
    pub fn normal_pair(&mut self) -> (f64, f64) {
        let u1 = self.uniform_open();
        let u2 = self.uniform_open();
        let r = (-2.0 * u1.ln()).sqrt();
        let (s, c) = (std::f64::consts::TAU * u2).sin_cos();
        (r * c, r * s)
    }

    /// Fills `out` (length `dim`) with one step's standard normals. For odd
    /// `dim` the unused half of the last pair is discarded, keeping the
    /// per-step consumption fixed.
    pub fn next_normals(&mut self, out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.dim);
        let mut k = 0;
        while k < self.dim {
            let (a, b) = self.normal_pair();
            out[k] = a;
            if k + 1 < self.dim {
                out[k + 1] = b;
            }
            k += 2;
        }
    }

    /// One step of Brownian increments with variance `h`.
    pub fn next_increments(&mut self, h: f64, out: &mut [f64]) {
        self.next_normals(out);
        let s = h.sqrt();
        out.iter_mut().for_each(|x| *x *= s);
    }
}
