//! Portable, counter-based random number generation.
//!
//! Every random draw in the pipeline goes through [`PortableRng`], a thin
//! wrapper around ChaCha8 (`rand_chacha`). The construction is fixed so that
//! any implementation can reproduce the stream bit for bit:
//!
//! * key: `ChaCha8Rng::seed_from_u64(seed)` (PCG32 key expansion from `rand_core`),
//! * stream: the 64-bit ChaCha nonce is set to the [`Stream`] discriminant
//!   (plus a caller-supplied sub-index for per-item or per-epoch streams),
//! * `uniform()`: the top 53 bits of the next `u64`, scaled by 2^-53,
//! * `below(n)`: Lemire's multiply-shift with rejection,
//! * `normal()`: Box-Muller using two fresh uniforms, cosine branch only.
//!
//! Sub-streams never share a nonce, so adding draws to one stage does not
//! shift any other stage.

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

/// Named stream families. The discriminant occupies the high 16 bits of the
/// ChaCha nonce; the low 48 bits carry a sub-index.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u16)]
pub enum Stream {
    Catalog = 1,
    Users = 2,
    Dropout = 3,
    Split = 4,
    KMeans = 5,
    FuseFallback = 6,
    Init = 7,
    Shuffle = 8,
    Eval = 9,
    Test = 10,
}

#[derive(Debug, Clone)]
pub struct PortableRng {
    inner: ChaCha8Rng,
}

impl PortableRng {
    pub fn new(seed: u64, stream: Stream) -> Self {
        Self::with_index(seed, stream, 0)
    }

    pub fn with_index(seed: u64, stream: Stream, index: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(((stream as u64) << 48) | (index & 0xFFFF_FFFF_FFFF));
        Self { inner }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in [0, 1).
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in [0, n). `n` must be positive.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        let n = n as u64;
        let threshold = n.wrapping_neg() % n;
        loop {
            let m = (self.next_u64() as u128) * (n as u128);
            if (m as u64) >= threshold {
                return (m >> 64) as usize;
            }
        }
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    /// Standard normal draw.
    pub fn normal(&mut self) -> f64 {
        // 1 - u keeps the log argument in (0, 1].
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// Fisher-Yates, walking from the back.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}
