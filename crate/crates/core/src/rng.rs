//! Named, independently seeded random streams.
//!
//! Each stream is a ChaCha8 generator keyed by SHA-256 of `(seed, name)`, so
//! adding or removing a consumer never shifts the values another consumer sees.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::tensor::Tensor;

pub type Stream = ChaCha8Rng;

pub fn stream(seed: u64, name: &str) -> Stream {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(name.as_bytes());
    let key: [u8; 32] = h.finalize().into();
    ChaCha8Rng::from_seed(key)
}

/// Uniform(−1/√fan_in, +1/√fan_in) initialization drawn from the stream `name`.
pub fn init_uniform(seed: u64, name: &str, shape: Vec<usize>, fan_in: usize) -> Tensor<f32> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let mut rng = stream(seed, name);
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| rng.random_range(-bound..bound) as f32)
        .collect();
    Tensor::new(shape, data).expect("init shape")
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}
