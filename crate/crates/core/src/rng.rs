//! Deterministic counter-based random number generation.
//!
//! Every output is a pure function of a 64-bit key and a draw counter:
//! draw `n` is `mix64(key + (n+1) * GAMMA)` where `mix64` is the splitmix64
//! finalizer. There is no hidden state beyond the counter, so identical
//! seeds reproduce identical sequences bit for bit across runs, and
//! independent substreams can be split off at any time without affecting
//! the parent stream.
//!
//! Integer and uniform outputs are exact dyadic rationals and therefore
//! platform-independent. Gaussian outputs go through `ln`/`cos`/`sqrt`,
//! which makes them bit-stable for a given libm build (always across runs
//! on the same system).

/// Weyl-sequence increment, the odd fractional part of the golden ratio.
const GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

/// Salt folded into substream derivation so that stream 0 differs from the
/// parent stream itself.
const STREAM_SALT: u64 = 0x6A09_E667_F3BC_C909;

/// splitmix64 finalizer: invertible avalanche mix of a 64-bit word.
#[inline]
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Counter-based pseudo-random generator with cheap substream derivation.
#[derive(Debug, Clone)]
pub struct Rng {
    key: u64,
    counter: u64,
}

impl Rng {
    /// Generator for the root stream of `seed`.
    pub fn new(seed: u64) -> Self {
        Rng {
            key: mix64(seed),
            counter: 0,
        }
    }

    /// Derives an independent child stream. The child's key depends only on
    /// the parent's key and `index`, never on how many draws the parent has
    /// already produced, so `rng.substream(i)` is reproducible at any point.
    pub fn substream(&self, index: u64) -> Rng {
        Rng {
            key: mix64(self.key ^ mix64(index ^ STREAM_SALT)),
            counter: 0,
        }
    }

    /// Next raw 64-bit draw.
    pub fn next_u64(&mut self) -> u64 {
        self.counter = self.counter.wrapping_add(1);
        mix64(self.key.wrapping_add(self.counter.wrapping_mul(GAMMA)))
    }

    /// Uniform draw in `[0, 1)` with 53-bit resolution.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * 2f64.powi(-53)
    }

    /// Standard normal draw via the Box-Muller transform. Consumes exactly
    /// two raw draws; nothing is cached between calls.
    pub fn normal(&mut self) -> f64 {
        // u1 is kept in (0, 1] so the logarithm stays finite.
        let u1 = ((self.next_u64() >> 11) as f64 + 1.0) * 2f64.powi(-53);
        let u2 = (self.next_u64() >> 11) as f64 * 2f64.powi(-53);
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// Vector of independent standard normal draws.
    pub fn normal_vec(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.normal()).collect()
    }

    /// Uniform draw in `{0, 1, ..., n-1}` via the multiply-shift reduction.
    /// The reduction bias is below 2^-32 for any desk-scale `n`.
    pub fn next_below(&mut self, n: u64) -> u64 {
        assert!(n > 0, "next_below requires n > 0");
        ((self.next_u64() as u128 * n as u128) >> 64) as u64
    }

    /// In-place Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        for i in (1..xs.len()).rev() {
            let j = self.next_below(i as u64 + 1) as usize;
            xs.swap(i, j);
        }
    }
}
