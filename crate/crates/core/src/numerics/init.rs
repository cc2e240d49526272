use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;

use super::tensor::Tensor;

/// Deterministic parameter initializer.
///
/// Each parameter draws from its own stream keyed by `(seed, name)`, so two
/// models built from the same seed share every identically named tensor no
/// matter which other parameters exist.
#[derive(Clone, Copy, Debug)]
pub struct Init {
    seed: u64,
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn rng(&self, name: &str) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(splitmix(self.seed ^ fnv1a(name.as_bytes())))
    }

    /// Entries from `Normal(0, variance)`.
    pub fn normal(&self, name: &str, shape: &[usize], variance: f64) -> Tensor {
        let mut rng = self.rng(name);
        let dist = Normal::new(0.0, variance.sqrt()).expect("variance must be finite and >= 0");
        Tensor::from_fn(shape, |_| rng.sample(dist))
    }

    pub fn uniform(&self, name: &str, shape: &[usize], lo: f64, hi: f64) -> Tensor {
        let mut rng = self.rng(name);
        Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
    }
}
