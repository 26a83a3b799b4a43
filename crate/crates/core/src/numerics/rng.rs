use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::matrix::C64;

/// A reproducible random stream identified by `(seed, stream)`.
///
/// Streams are value types; each Monte-Carlo trial owns its own.
#[derive(Debug, Clone)]
pub struct RngStream(ChaCha8Rng);

impl RngStream {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        Self(rng)
    }

    /// Stream keyed by a tuple of labels, e.g. `(base_seed, [trial, purpose])`.
    pub fn derive(seed: u64, keys: &[u64]) -> Self {
        let mixed = keys.iter().fold(splitmix(seed), |acc, &k| splitmix(acc ^ splitmix(k)));
        Self::new(mixed, keys.first().copied().unwrap_or(0))
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.0)
    }

    pub fn uniform(&mut self) -> f64 {
        rand::Rng::random::<f64>(&mut self.0)
    }

    pub fn below(&mut self, n: usize) -> usize {
        rand::Rng::random_range(&mut self.0, 0..n)
    }

    /// Circularly-symmetric complex Gaussian with total variance `variance`.
    pub fn complex_normal(&mut self, variance: f64) -> C64 {
        let s = (0.5 * variance).sqrt();
        C64::new(s * self.normal(), s * self.normal())
    }

    /// Uniform ±1 symbol.
    pub fn sign(&mut self) -> f64 {
        if self.0.next_u32() & 1 == 0 { 1.0 } else { -1.0 }
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.0.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.0.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.0.fill_bytes(dst)
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// `n` i.i.d. CN(0, variance) entries.
pub fn sample_complex_gaussian(rng: &mut RngStream, n: usize, variance: f64) -> Vec<C64> {
    (0..n).map(|_| rng.complex_normal(variance)).collect()
}
