//! Seedable pseudo-random generator with a stable, documented update rule.
//!
//! The generator is xorshift64* (Vigna): the 64-bit state advances as
//! `x ^= x >> 12; x ^= x << 25; x ^= x >> 27` and the output is
//! `x * 0x2545F4914F6CDD1D`. The update uses integer arithmetic only, so a
//! given seed produces the same draw sequence on every platform. Seeds are
//! scrambled through one round of splitmix64 so that small consecutive seeds
//! (1, 2, 3, ...) start from well-separated states.

const SPLITMIX_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(SPLITMIX_GAMMA);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// xorshift64* generator. State is a single non-zero 64-bit word.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rng {
    state: u64,
}

impl Rng {
    /// Seed the generator. Any seed (including 0) is valid.
    pub fn new(seed: u64) -> Self {
        let mut state = splitmix64(seed);
        if state == 0 {
            state = SPLITMIX_GAMMA;
        }
        Self { state }
    }

    /// Resume from a raw state word previously returned by [`Rng::state`].
    pub fn from_state(state: u64) -> Self {
        let state = if state == 0 { SPLITMIX_GAMMA } else { state };
        Self { state }
    }

    /// Raw state word, for checkpointing.
    pub fn state(&self) -> u64 {
        self.state
    }

    pub fn next_u64(&mut self) -> u64 {
        let mut x = self.state;
        x ^= x >> 12;
        x ^= x << 25;
        x ^= x >> 27;
        self.state = x;
        x.wrapping_mul(0x2545_F491_4F6C_DD1D)
    }

    /// Uniform draw in `[0, 1)` with 53 bits of precision.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform draw in `[lo, hi)`.
    pub fn next_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Uniform integer in `[0, n)`. Modulo bias is below 2^-32 for the
    /// dataset sizes used here.
    pub fn next_below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        (self.next_u64() % n as u64) as usize
    }

    /// Standard normal draw via Box-Muller (consumes two uniforms).
    pub fn next_normal(&mut self) -> f64 {
        let u1 = loop {
            let u = self.next_f64();
            if u > 0.0 {
                break u;
            }
        };
        let u2 = self.next_f64();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// Normal draw with the given mean and standard deviation.
    pub fn next_gaussian(&mut self, mean: f64, std: f64) -> f64 {
        mean + std * self.next_normal()
    }
}

/// Generator for composing mini-batch `iteration` of a run seeded with
/// `seed`. Batch contents are a pure function of `(seed, iteration)`, so
/// prefetching or resuming cannot change which samples a batch holds.
pub fn batch_rng(seed: u64, iteration: u64) -> Rng {
    Rng::new(seed ^ splitmix64(iteration.wrapping_add(1)))
}
