//! Seeded random streams.
//!
//! Every consumer derives its own ChaCha stream from `(seed, label)`, so no
//! state is shared between components and adding a consumer never shifts the
//! draws of another.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::autodiff::Tensor;

pub type Stream = ChaCha8Rng;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn label_hash(label: &str) -> u64 {
    label
        .bytes()
        .fold(FNV_OFFSET, |h, b| (h ^ u64::from(b)).wrapping_mul(FNV_PRIME))
}

/// Independent stream for `label` under `seed`.
pub fn stream(seed: u64, label: &str) -> Stream {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(label_hash(label));
    rng
}

pub fn normal(rng: &mut Stream) -> f64 {
    rng.sample(StandardNormal)
}

pub fn uniform(rng: &mut Stream) -> f64 {
    rng.random::<f64>()
}

pub fn normal_tensor(rng: &mut Stream, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| normal(rng)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape and data agree")
}

pub fn uniform_tensor(rng: &mut Stream, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| uniform(rng)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape and data agree")
}
