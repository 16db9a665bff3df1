//! SplitMix64 generator: the single randomness source of the workspace.
//!
//! Every stochastic procedure (degradation synthesis, rollout sampling,
//! texture generation) draws from this generator so that a seed fully
//! determines a run. The update rule is pure 64-bit integer arithmetic and
//! therefore bit-exact across platforms; Gaussian draws use Box-Muller on
//! top of it rather than any platform RNG.

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Prng {
    state: u64,
}

impl Prng {
    pub fn new(seed: u64) -> Self {
        Prng { state: seed }
    }

    /// Derive an independent stream for substream `idx` of `base`.
    /// Used so parallel work items (one per image, one per rollout) draw
    /// from disjoint deterministic streams regardless of schedule.
    pub fn derive(base: u64, idx: u64) -> Self {
        let mut p = Prng::new(base ^ idx.wrapping_mul(GOLDEN_GAMMA));
        p.next_u64();
        p
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GOLDEN_GAMMA);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// Uniform in [0, 1): 53 random mantissa bits.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / 9007199254740992.0)
    }

    /// Uniform in [lo, hi).
    pub fn range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in [0, n). `n` must be nonzero.
    pub fn below(&mut self, n: u64) -> u64 {
        // Modulo bias is irrelevant at the n << 2^64 scales used here.
        self.next_u64() % n
    }

    /// Standard normal via Box-Muller. Consumes two draws; the sine branch
    /// is discarded so each call is self-contained and stream-stable.
    pub fn normal(&mut self) -> f64 {
        // u1 in (0, 1] keeps ln() finite.
        let u1 = ((self.next_u64() >> 11) + 1) as f64 * (1.0 / 9007199254740992.0);
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }
}
