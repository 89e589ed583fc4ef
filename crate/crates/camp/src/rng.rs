//! Deterministic pseudo-random number generation.
//!
//! Every source of randomness in the crate (weight init, batch sampling,
//! corpus splits, test fuzzing) flows through [`Rng`], seeded explicitly by
//! the caller. The generator is SplitMix64: a single u64 of state, full
//! 2^64 period over state values, and good enough statistical quality for
//! initialization and sampling. Keeping the state to one word means a
//! checkpoint can capture it exactly and training can resume bit-for-bit.
//!
//! SplitMix64 constants (Steele, Lea & Flood, "Fast splittable pseudorandom
//! number generators", OOPSLA 2014):
//!   state increment   0x9E3779B97F4A7C15 (2^64 / golden ratio)
//!   mix multiplier 1  0xBF58476D1CE4E5B9
//!   mix multiplier 2  0x94D049BB133111EB

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rng {
    state: u64,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng { state: seed }
    }

    /// Raw state, for exact-resume checkpointing.
    pub fn state(&self) -> u64 {
        self.state
    }

    pub fn from_state(state: u64) -> Self {
        Rng { state }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9E3779B97F4A7C15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
        z ^ (z >> 31)
    }

    /// Uniform in [0, 1) with 53 random bits.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in [0, n). Uses the multiply-shift range reduction
    /// (Lemire 2019), which is bias-free for n ≪ 2^64 and branchless.
    pub fn next_below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0, "next_below(0)");
        ((self.next_u64() as u128 * n as u128) >> 64) as usize
    }

    /// Standard normal via Box–Muller. The pair's second output is
    /// discarded rather than cached so that generator state remains a
    /// single u64 (a cache would have to be checkpointed too).
    pub fn next_normal(&mut self) -> f64 {
        // u1 in (0, 1] so the log is finite; u2 in [0, 1).
        let u1 = ((self.next_u64() >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64);
        let u2 = self.next_f64();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// In-place Fisher–Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.next_below(i + 1);
            items.swap(i, j);
        }
    }
}
