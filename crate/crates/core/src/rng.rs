//! Named random streams derived from one seed.
//!
//! Each purpose draws from its own ChaCha stream, so reseeding or consuming
//! one stream never shifts another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::numerics::Tensor;
use crate::scalar::Scalar;

pub type Rng = ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Init = 1,
    Xi = 2,
    Eta = 3,
    Shuffle = 4,
    Split = 5,
    Synth = 6,
    Ensemble = 7,
    Uncertainty = 8,
}

pub fn stream(seed: u64, which: Stream) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(which as u64);
    rng
}

/// Sub-stream for item `index` of a stream, e.g. one ensemble member.
pub fn substream(seed: u64, which: Stream, index: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    rng.set_stream(which as u64);
    rng
}

pub fn standard_normal(rng: &mut Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// `rows × cols` tensor of independent standard-normal draws.
pub fn normal_tensor<T: Scalar>(rng: &mut Rng, rows: usize, cols: usize, std: f64) -> Tensor<T> {
    let data = (0..rows * cols).map(|_| T::of(std * standard_normal(rng))).collect();
    Tensor::new(vec![rows, cols], data).expect("shape matches")
}
