//! Seeded, splittable random streams.
//!
//! An [`RngState`] is a plain value: a 64-bit seed plus a 64-bit stream id.
//! It maps onto a ChaCha8 keystream (key from the seed, nonce from the
//! stream), so every `(seed, stream)` pair yields the same sequence on every
//! platform and distinct stream ids give disjoint sequences. Children are
//! derived by hashing a label into the parent's stream id.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub stream: u64,
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes
        .iter()
        .fold(FNV_OFFSET, |h, &b| (h ^ u64::from(b)).wrapping_mul(FNV_PRIME))
}

// splitmix64 finalizer
fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl RngState {
    pub fn new(seed: u64) -> Self {
        Self { seed, stream: 0 }
    }

    /// Derive an independent child stream from a textual label.
    pub fn child(&self, label: &str) -> Self {
        Self {
            seed: self.seed,
            stream: mix(self.stream ^ mix(fnv1a(label.as_bytes()))),
        }
    }

    /// Derive a child stream from an integer label (iteration, trial, ...).
    pub fn child_index(&self, index: u64) -> Self {
        Self {
            seed: self.seed,
            stream: mix(self.stream.wrapping_add(mix(index ^ 0x9e37_79b9_7f4a_7c15))),
        }
    }

    pub fn sampler(&self) -> Sampler {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.stream);
        Sampler { rng, spare: None }
    }
}

/// Draws from one stream. Normals use the Box-Muller transform of two
/// 53-bit uniforms and emit both outputs of each pair in order.
pub struct Sampler {
    rng: ChaCha8Rng,
    spare: Option<f64>,
}

const TWO_POW_MINUS_53: f64 = 1.0 / (1u64 << 53) as f64;

impl Sampler {
    /// Uniform on `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        (self.rng.next_u64() >> 11) as f64 * TWO_POW_MINUS_53
    }

    /// Uniform on `(0, 1]`.
    fn uniform_open_zero(&mut self) -> f64 {
        ((self.rng.next_u64() >> 11) + 1) as f64 * TWO_POW_MINUS_53
    }

    pub fn standard_normal(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        let u1 = self.uniform_open_zero();
        let u2 = self.uniform();
        let radius = (-2.0 * u1.ln()).sqrt();
        let angle = std::f64::consts::TAU * u2;
        self.spare = Some(radius * angle.sin());
        radius * angle.cos()
    }

    pub fn normal(&mut self, variance: f64) -> f64 {
        variance.sqrt() * self.standard_normal()
    }

    /// Uniform integer in `0..bound`.
    pub fn below(&mut self, bound: usize) -> usize {
        assert!(bound > 0, "empty range");
        // Lemire's multiply-shift with rejection keeps the draw unbiased.
        let bound = bound as u64;
        let threshold = bound.wrapping_neg() % bound;
        loop {
            let x = self.rng.next_u64();
            let wide = u128::from(x) * u128::from(bound);
            if (wide as u64) >= threshold {
                return (wide >> 64) as usize;
            }
        }
    }

    /// `amount` distinct values from `0..length`, in draw order (partial Fisher-Yates).
    pub fn distinct(&mut self, length: usize, amount: usize) -> Vec<usize> {
        assert!(amount <= length, "cannot draw {amount} distinct values from {length}");
        let mut pool: Vec<usize> = (0..length).collect();
        for slot in 0..amount {
            let pick = slot + self.below(length - slot);
            pool.swap(slot, pick);
        }
        pool.truncate(amount);
        pool
    }

    pub fn unit_vector(&mut self, dim: usize) -> Vec<f64> {
        loop {
            let v: Vec<f64> = (0..dim).map(|_| self.standard_normal()).collect();
            let norm = crate::linalg::norm(&v);
            if norm > 1e-12 {
                return v.into_iter().map(|x| x / norm).collect();
            }
        }
    }
}
