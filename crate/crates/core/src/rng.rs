//! Deterministic random streams for weight initialization and workload
//! synthesis.
//!
//! Everything that needs randomness in this crate draws from splitmix64 so
//! identical seeds give bit-identical results on every platform.

/// splitmix64 generator.
#[derive(Debug, Clone)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        Self { state: seed }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9E37_79B9_7F4A_7C15);
        mix(self.state)
    }

    /// Uniform draw in `(0, 1]`.
    pub fn next_unit_f64(&mut self) -> f64 {
        (((self.next_u64() >> 11) + 1) as f64) * (1.0 / 9_007_199_254_740_992.0)
    }

    /// Uniform draw in `[0, n)`.
    pub fn next_below(&mut self, n: u64) -> u64 {
        debug_assert!(n > 0);
        // Modulo bias is irrelevant at the ranges used here (n << 2^64).
        self.next_u64() % n
    }
}

/// splitmix64 finalizer, also used to derive independent stream seeds.
#[inline]
pub fn mix(z: u64) -> u64 {
    let z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    let z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives the seed of an independent stream identified by `(domain, index)`.
pub fn stream_seed(seed: u64, domain: u64, index: u64) -> u64 {
    mix(seed ^ mix(domain.wrapping_add(0x4C41_5945)) ^ mix(index.wrapping_add(0x5445_4E53)))
}

/// Standard-normal draws via Box–Muller over a splitmix64 stream.
///
/// Draws are produced in pairs; the `count`-th draw for a given seed never
/// depends on `count`, so prefixes of the stream are stable.
pub fn gaussian_stream(seed: u64, count: usize) -> Vec<f64> {
    let mut rng = SplitMix64::new(seed);
    let mut out = Vec::with_capacity(count + 1);
    while out.len() < count {
        let u1 = rng.next_unit_f64();
        let u2 = rng.next_unit_f64();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        out.push(r * theta.cos());
        out.push(r * theta.sin());
    }
    out.truncate(count);
    out
}
