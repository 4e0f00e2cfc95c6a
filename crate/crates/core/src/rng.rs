//! Seeded pseudorandom numbers.
//!
//! Every random decision in the crate (parameter init, splits, shuffles,
//! synthetic data) goes through [`SplitMix64`] so that a single `u64` seed
//! pins the whole run. The generator and every derived draw are defined
//! exactly below, which makes them reproducible from other languages:
//!
//! ```text
//! next_u64:  state += 0x9E3779B97F4A7C15; return mix64(state)
//! mix64(z):  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9
//!            z = (z ^ (z >> 27)) * 0x94D049BB133111EB
//!            z ^ (z >> 31)                       (all arithmetic mod 2^64)
//! next_f64:  (next_u64 >> 11) * 2^-53             in [0, 1)
//! below(n):  (next_u64 * n) >> 64                 (128-bit product)
//! normal:    Box-Muller, sqrt(-2 ln(1 - u1)) * cos(2 pi u2), one draw per call
//! shuffle:   Fisher-Yates, i = n-1 down to 1, j = below(i + 1)
//! derive(seed, stream) = SplitMix64::new(mix64(seed ^ mix64(stream)))
//! ```

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

/// Stream ids used to derive independent generators from one run seed.
pub mod stream {
    pub const SPLIT: u64 = 1;
    pub const INIT: u64 = 2;
    pub const TRAIN: u64 = 3;
    pub const SYNTH_ORDER: u64 = 4;
    pub const SYNTH_USERS: u64 = 5;
}

#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        Self { state: seed }
    }

    /// Independent generator for `stream` under `seed`.
    pub fn derive(seed: u64, stream: u64) -> Self {
        Self::new(mix64(seed ^ mix64(stream)))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GOLDEN_GAMMA);
        mix64(self.state)
    }

    /// Uniform in `[0, 1)` with 53 bits of precision.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in `[0, n)`. Returns 0 when `n == 0`.
    pub fn below(&mut self, n: u64) -> u64 {
        ((self.next_u64() as u128 * n as u128) >> 64) as u64
    }

    /// Uniform integer in `[lo, hi]`.
    pub fn range_inclusive(&mut self, lo: u64, hi: u64) -> u64 {
        debug_assert!(lo <= hi);
        lo + self.below(hi - lo + 1)
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.next_f64() < p
    }

    /// Standard normal draw.
    pub fn normal(&mut self) -> f64 {
        let u1 = 1.0 - self.next_f64();
        let u2 = self.next_f64();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i as u64 + 1) as usize;
            items.swap(i, j);
        }
    }
}
