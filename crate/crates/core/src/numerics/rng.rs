//! Seeded randomness: parameter initialization and keyed noise streams.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::matrix::Matrix;

/// SplitMix64 finalizer; used to derive independent stream seeds.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Folds a sequence of keys into one stream id.
pub fn stream_id(seed: u64, keys: &[u64]) -> u64 {
    keys.iter()
        .fold(splitmix64(seed), |acc, &k| splitmix64(acc ^ splitmix64(k)))
}

pub fn rng_for(stream: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(stream)
}

/// Matrix of standard normals rounded to `f32`, so that writing it to disk in
/// single precision loses nothing.
pub fn normal_matrix(rng: &mut impl Rng, rows: usize, cols: usize, std: f64) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| {
        let z: f64 = rng.sample(StandardNormal);
        (z * std) as f32 as f64
    })
}

/// Normal with standard deviation `std`, redrawn until it lies within two
/// standard deviations of zero, rounded to `f32`.
pub fn trunc_normal_matrix(rng: &mut impl Rng, rows: usize, cols: usize, std: f64) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| loop {
        let z: f64 = rng.sample(StandardNormal);
        if z.abs() <= 2.0 {
            break (z * std) as f32 as f64;
        }
    })
}

/// Parameter initializer shared by all layers of one build.
pub struct Init {
    rng: ChaCha8Rng,
    std: f64,
}

impl Init {
    pub fn new(seed: u64, std: f64) -> Self {
        Self {
            rng: rng_for(stream_id(seed, &[0x1417])),
            std,
        }
    }

    pub fn std(&self) -> f64 {
        self.std
    }

    pub fn trunc_normal(&mut self, rows: usize, cols: usize) -> Matrix {
        trunc_normal_matrix(&mut self.rng, rows, cols, self.std)
    }
}
