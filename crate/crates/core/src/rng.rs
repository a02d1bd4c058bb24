//! Deterministic random numbers.
//!
//! Everything random in this crate runs off SplitMix64, chosen because the
//! full recurrence fits in a dozen lines and can be re-implemented exactly
//! in any language:
//!
//! ```text
//! state += 0x9E3779B97F4A7C15
//! z = state
//! z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9
//! z = (z ^ (z >> 27)) * 0x94D049BB133111EB
//! output = z ^ (z >> 31)
//! ```
//!
//! Streams for sub-components are derived, never shared: `derive` mixes an
//! FNV-1a hash of the component name into the root seed, `mix` folds in an
//! integer index. Both go through one SplitMix64 step so related seeds do
//! not produce related streams.

const GOLDEN: u64 = 0x9E3779B97F4A7C15;

#[inline]
fn splitmix_output(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

/// SplitMix64 generator.
#[derive(Debug, Clone)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        SplitMix64 { state: seed }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GOLDEN);
        splitmix_output(self.state)
    }

    /// Uniform in [0, 1), 53 mantissa bits.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in [lo, hi).
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Uniform integer in [0, n).
    pub fn below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        (self.next_u64() % n as u64) as usize
    }

    /// Standard normal via Box-Muller. Draws two uniforms per call and
    /// discards the second variate, so the stream position is a pure
    /// function of the call count.
    pub fn normal(&mut self) -> f64 {
        let u1 = loop {
            let u = self.next_f64();
            if u > 0.0 {
                break u;
            }
        };
        let u2 = self.next_f64();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}

/// Derive a component seed from a root seed and a component name
/// (FNV-1a over the name, xor'd into the root, one SplitMix64 step).
pub fn derive(root: u64, component: &str) -> u64 {
    let mut h: u64 = 0xCBF29CE484222325;
    for b in component.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001B3);
    }
    splitmix_output(root ^ h)
}

/// Derive a sub-seed from a seed and an integer index.
pub fn mix(seed: u64, index: u64) -> u64 {
    splitmix_output(seed ^ index.wrapping_mul(GOLDEN))
}
