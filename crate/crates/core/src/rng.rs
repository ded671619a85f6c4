//! Keyed deterministic random streams.
//!
//! Every consumer derives its own ChaCha8 stream from `(seed, key)`, so no
//! generator state is shared or carried between call sites.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::tensor::{Element, Tensor};

fn fnv1a(key: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in key.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

pub fn stream(seed: u64, key: &str) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(fnv1a(key));
    rng
}

/// Stream keyed by a seed, a label and an integer counter (e.g. an epoch).
pub fn stream_indexed(seed: u64, key: &str, index: u64) -> ChaCha8Rng {
    stream(seed ^ index.wrapping_mul(0x9e37_79b9_7f4a_7c15), key)
}

pub fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

pub fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    rng.random_range(lo..hi)
}

/// Tensor of i.i.d. `N(0, std²)` entries.
pub fn gaussian_tensor<T: Element>(seed: u64, key: &str, shape: &[usize], std: f64) -> Tensor<T> {
    let mut rng = stream(seed, key);
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| T::lit(std * gaussian(&mut rng))).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches")
}

/// Fisher-Yates permutation of `0..n`.
pub fn permutation(rng: &mut ChaCha8Rng, n: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        idx.swap(i, j);
    }
    idx
}
