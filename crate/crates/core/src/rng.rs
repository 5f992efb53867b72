//! Counter-based pseudo-random number generation.
//!
//! Every random draw in the crate is a pure function of a `(seed, counter)`
//! pair, so runs replay bit-exactly: restoring an [`RngState`] and re-drawing
//! yields the same values, and independent subsystems (weight init, batch
//! shuffling, per-layer noise) use separate streams derived from the run seed
//! so drawing from one never perturbs another.
//!
//! The generator is the splitmix64 output function applied to
//! `seed + counter * GOLDEN`, which passes standard statistical batteries and
//! needs no hidden state beyond the two words.

/// Multiplicative constant (2^64 / phi) used to space successive counters.
const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

/// A replayable random stream: the next value is a pure function of
/// `(seed, counter)`, and each draw advances `counter` by one.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: u64,
    pub counter: u64,
}

/// splitmix64 finalizer: a bijective mixer with full avalanche.
#[inline]
fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl RngState {
    /// Fresh stream with the counter at zero.
    pub fn new(seed: u64) -> Self {
        RngState { seed, counter: 0 }
    }

    /// Derive an independent stream from this one. Streams with different
    /// `id`s (or different parent seeds) are statistically independent;
    /// deriving does not consume draws from the parent.
    pub fn stream(&self, id: u64) -> RngState {
        RngState { seed: mix(self.seed ^ mix(id.wrapping_mul(GOLDEN) ^ 0x5851_F42D_4C95_7F2D)), counter: 0 }
    }

    /// Next raw 64-bit value.
    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        let x = mix(self.seed.wrapping_add(self.counter.wrapping_mul(GOLDEN)));
        self.counter += 1;
        x
    }

    /// Uniform draw in the open interval (0, 1): the top 53 bits are offset
    /// by half a step, so 0.0 and 1.0 are unreachable and `ln(u)` is always
    /// finite.
    #[inline]
    pub fn next_open01(&mut self) -> f64 {
        ((self.next_u64() >> 11) as f64 + 0.5) * (1.0 / 9_007_199_254_740_992.0)
    }

    /// Uniform draw in [lo, hi).
    #[inline]
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * ((self.next_u64() >> 11) as f64) * (1.0 / 9_007_199_254_740_992.0)
    }

    /// Standard normal draw via Box-Muller on two uniform draws. No spare is
    /// cached, so the mapping from counter to value stays stateless.
    #[inline]
    pub fn next_normal(&mut self) -> f64 {
        let u1 = self.next_open01();
        let u2 = self.next_open01();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// Uniform integer in [0, n). `n` must be nonzero.
    #[inline]
    pub fn below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        (self.next_u64() % n as u64) as usize
    }

    /// In-place Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        for i in (1..xs.len()).rev() {
            let j = self.below(i + 1);
            xs.swap(i, j);
        }
    }
}
