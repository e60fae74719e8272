//! Seeded random streams.
//!
//! Every consumer of randomness draws from its own ChaCha8 stream derived
//! from the run seed, so adding draws in one place never shifts another.

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub type SimRng = ChaCha8Rng;

pub const STREAM_BASIS: u64 = 1;
pub const STREAM_INIT: u64 = 2;
pub const STREAM_TRAIN_DATA: u64 = 3;
pub const STREAM_EVAL_DATA: u64 = 4;
pub const STREAM_PROBE_DATA: u64 = 5;
pub const STREAM_MINIBATCH: u64 = 6;
pub const STREAM_OOD: u64 = 7;

pub fn stream(seed: u64, stream: u64) -> SimRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Stream for item `index` of a keyed collection. Items sit 2^36 words
/// apart in the ChaCha keystream.
pub fn indexed(seed: u64, stream_id: u64, index: u64) -> SimRng {
    let mut rng = stream(seed, stream_id);
    rng.set_word_pos(u128::from(index) << 36);
    rng
}

/// Isotropic Gaussian vector with standard deviation `sd` per coordinate.
/// `sd == 0` consumes no randomness.
pub fn gaussian_vector<R: Rng + ?Sized>(d: usize, sd: f64, rng: &mut R) -> Array1<f64> {
    if sd == 0.0 {
        return Array1::zeros(d);
    }
    Array1::from_shape_fn(d, |_| sd * rng.sample::<f64, _>(StandardNormal))
}

pub fn gaussian_matrix<R: Rng + ?Sized>(rows: usize, cols: usize, sd: f64, rng: &mut R) -> Array2<f64> {
    if sd == 0.0 {
        return Array2::zeros((rows, cols));
    }
    Array2::from_shape_fn((rows, cols), |_| sd * rng.sample::<f64, _>(StandardNormal))
}

pub fn random_sign<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    if rng.random_bool(0.5) {
        1.0
    } else {
        -1.0
    }
}
