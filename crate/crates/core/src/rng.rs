//! Reproducible random streams.
//!
//! Every stream is a ChaCha8 generator (a counter-based cipher stream, so
//! its position is a plain word counter that can be saved and restored).
//! Derived values use fixed transforms so results do not depend on the
//! version of any sampling crate:
//!
//! * uniform `[0, 1)`: the top 53 bits of one `u64` times 2⁻⁵³;
//! * integer below `n`: rejection sampling on `u64` (unbiased);
//! * standard normal: Box–Muller on `(1 − u₁, u₂)`, emitting the cosine
//!   branch first and caching the sine branch for the next call.
//!
//! Role streams come from `SHA-256(master_seed_le ‖ role)`, whose first
//! 32 bytes seed the generator.

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};
use sha2::{Digest, Sha256};

use crate::engine::{Element, Tensor};

#[derive(Clone, Debug)]
pub struct SeedStream {
    rng: ChaCha8Rng,
    spare: Option<f64>,
}

/// Saved position of a [`SeedStream`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StreamPosition {
    pub seed: [u8; 32],
    pub word_pos: u128,
    pub spare_bits: Option<u64>,
}

impl SeedStream {
    pub fn from_seed(seed: u64) -> Self {
        Self::derive(seed, "")
    }

    /// Independent stream for `role` under `master`.
    pub fn derive(master: u64, role: &str) -> Self {
        let mut h = Sha256::new();
        h.update(master.to_le_bytes());
        h.update(role.as_bytes());
        let seed: [u8; 32] = h.finalize().into();
        Self {
            rng: ChaCha8Rng::from_seed(seed),
            spare: None,
        }
    }

    /// A child stream keyed by this stream's next output and `role`.
    pub fn fork(&mut self, role: &str) -> Self {
        let k = self.next_u64();
        Self::derive(k, role)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in `[0, n)`.
    pub fn below(&mut self, n: u64) -> u64 {
        assert!(n > 0);
        let zone = u64::MAX - (u64::MAX % n);
        loop {
            let x = self.next_u64();
            if x < zone {
                return x % n;
            }
        }
    }

    /// Uniform integer in `[lo, hi]`.
    pub fn range_inclusive(&mut self, lo: usize, hi: usize) -> usize {
        lo + self.below((hi - lo + 1) as u64) as usize
    }

    pub fn normal(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.spare = Some(r * theta.sin());
        r * theta.cos()
    }

    pub fn normal_tensor<E: Element>(&mut self, dims: &[usize]) -> Tensor<E> {
        let n: usize = dims.iter().product();
        let data = (0..n).map(|_| E::from_f64(self.normal())).collect();
        Tensor::new(dims.to_vec(), data).expect("dims match count")
    }

    pub fn position(&self) -> StreamPosition {
        StreamPosition {
            seed: self.rng.get_seed(),
            word_pos: self.rng.get_word_pos(),
            spare_bits: self.spare.map(f64::to_bits),
        }
    }

    pub fn restore(pos: &StreamPosition) -> Self {
        let mut rng = ChaCha8Rng::from_seed(pos.seed);
        rng.set_word_pos(pos.word_pos);
        Self {
            rng,
            spare: pos.spare_bits.map(f64::from_bits),
        }
    }
}

impl StreamPosition {
    /// `hex(seed):word_pos:spare` where spare is `-` or the f64 bits in hex.
    pub fn encode(&self) -> String {
        let seed: String = self.seed.iter().map(|b| format!("{b:02x}")).collect();
        let spare = self
            .spare_bits
            .map_or_else(|| "-".to_string(), |b| format!("{b:016x}"));
        format!("{seed}:{}:{spare}", self.word_pos)
    }

    pub fn decode(s: &str) -> Option<Self> {
        let mut parts = s.trim().split(':');
        let seed_hex = parts.next()?;
        let word_pos = parts.next()?.parse().ok()?;
        let spare = parts.next()?;
        if parts.next().is_some() || seed_hex.len() != 64 {
            return None;
        }
        let mut seed = [0u8; 32];
        for (i, b) in seed.iter_mut().enumerate() {
            *b = u8::from_str_radix(&seed_hex[2 * i..2 * i + 2], 16).ok()?;
        }
        let spare_bits = if spare == "-" {
            None
        } else {
            Some(u64::from_str_radix(spare, 16).ok()?)
        };
        Some(Self {
            seed,
            word_pos,
            spare_bits,
        })
    }
}
