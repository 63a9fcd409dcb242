//! Deterministic seeding. Every random stream in the crate is derived from a
//! base seed plus a textual label, so independent components never share a
//! stream and results do not depend on construction order.

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// 64-bit FNV-1a.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

pub fn mix(seed: u64, label: &str) -> u64 {
    let mut bytes = seed.to_le_bytes().to_vec();
    bytes.extend_from_slice(label.as_bytes());
    fnv1a64(&bytes)
}

pub fn rng(seed: u64, label: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(seed, label))
}

pub fn normal_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| {
        let z: f64 = StandardNormal.sample(rng);
        z * std
    })
}

pub fn normal_vec(rng: &mut ChaCha8Rng, len: usize, std: f64) -> Vec<f64> {
    (0..len)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            z * std
        })
        .collect()
}

/// Round every entry to the nearest `f32`. Agent outputs pass through this so
/// that cached and live knowledge are bit-identical.
pub fn round_f32(m: &mut Array2<f64>) {
    m.mapv_inplace(|v| v as f32 as f64);
}
