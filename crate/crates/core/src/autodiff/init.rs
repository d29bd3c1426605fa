use rand::{Rng, RngExt};
use rand_distr::{Distribution, Normal};

use super::Tensor;

/// Glorot/Xavier uniform on `[-a, a]` with `a = sqrt(6 / (fan_in + fan_out))`.
pub fn xavier_uniform<R: Rng + ?Sized>(rng: &mut R, shape: &[usize], fan_in: usize, fan_out: usize) -> Tensor {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt() as f32;
    Tensor::from_fn(shape, |_| rng.random_range(-a..a))
}

pub fn normal<R: Rng + ?Sized>(rng: &mut R, shape: &[usize], std: f32) -> Tensor {
    let dist = Normal::new(0.0f32, std).expect("std must be finite and non-negative");
    Tensor::from_fn(shape, |_| dist.sample(rng))
}
