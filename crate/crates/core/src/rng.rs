//! Reproducible random streams.
//!
//! All randomness in the crate flows through [`Stream`], a ChaCha20 keystream
//! keyed by a 64-bit seed and addressed by a 64-bit stream id. The key is the
//! seed in little-endian order in bytes 0..8 with the remaining 24 bytes zero.
//! Distinct stream ids give independent sequences, so per-sample randomness
//! can be generated in any order (or in parallel) with identical results.
//!
//! Uniforms take the top 53 bits of a `u64` and lie in `(0, 1]`. Normals use
//! the Box–Muller transform on consecutive uniform pairs `(u1, u2)`, emitting
//! `sqrt(-2 ln u1) cos(2 pi u2)` first and then `sqrt(-2 ln u1) sin(2 pi u2)`.

use rand_chacha::ChaCha20Rng;
use rand_core::{RngCore, SeedableRng};

pub struct Stream {
    rng: ChaCha20Rng,
    spare: Option<f64>,
}

impl Stream {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut key = [0u8; 32];
        key[..8].copy_from_slice(&seed.to_le_bytes());
        let mut rng = ChaCha20Rng::from_seed(key);
        rng.set_stream(stream);
        Stream { rng, spare: None }
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    /// Uniform draw in `(0, 1]`.
    #[inline]
    pub fn uniform(&mut self) -> f64 {
        ((self.next_u64() >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in `[0, bound)`.
    pub fn below(&mut self, bound: u64) -> u64 {
        debug_assert!(bound > 0);
        // Lemire-style rejection keeps the draw unbiased.
        let zone = u64::MAX - (u64::MAX % bound);
        loop {
            let x = self.next_u64();
            if x < zone {
                return x % bound;
            }
        }
    }

    /// Standard normal draw.
    pub fn normal(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        let u1 = self.uniform();
        let u2 = self.uniform();
        let radius = (-2.0 * u1.ln()).sqrt();
        let angle = std::f64::consts::TAU * u2;
        self.spare = Some(radius * angle.sin());
        radius * angle.cos()
    }
}
