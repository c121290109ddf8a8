//! Seeded random-number helpers. All stochastic state in the crate flows from
//! explicit u64 seeds through ChaCha8 so runs replay bit-identically.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::diffcore::Tensor;
use crate::scalar::Scalar;

pub type SeededRng = ChaCha8Rng;

pub fn seeded(seed: u64) -> SeededRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Derive an independent stream for a named purpose from a run seed.
pub fn sub_seed(seed: u64, tag: &str) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64; // FNV-1a
    for b in seed.to_le_bytes() {
        h = (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01B3);
    }
    for b in tag.as_bytes() {
        h = (h ^ *b as u64).wrapping_mul(0x0000_0100_0000_01B3);
    }
    h
}

pub fn uniform_tensor<E: Scalar>(
    rng: &mut SeededRng,
    shape: Vec<usize>,
    lo: f64,
    hi: f64,
) -> Tensor<E> {
    Tensor::from_fn(shape, |_| E::from_f64(rng.random::<f64>() * (hi - lo) + lo))
}

/// Standard normal draws via Box-Muller, scaled and shifted.
pub fn normal_tensor<E: Scalar>(
    rng: &mut SeededRng,
    shape: Vec<usize>,
    mean: f64,
    std: f64,
) -> Tensor<E> {
    Tensor::from_fn(shape, |_| E::from_f64(normal_draw(rng) * std + mean))
}

pub fn normal_draw(rng: &mut SeededRng) -> f64 {
    let u1: f64 = rng.random::<f64>().max(1e-300);
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Seeded Fisher-Yates shuffle.
pub fn shuffle<T>(rng: &mut SeededRng, items: &mut [T]) {
    for i in (1..items.len()).rev() {
        let j = rng.random_range(0..=i);
        items.swap(i, j);
    }
}
