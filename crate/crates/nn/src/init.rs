//! Deterministic parameter initialization.

use crate::tensor::Tensor;
use pmr_core::Scalar;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

pub fn seeded(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Uniform `[-sqrt(1/fan_in), sqrt(1/fan_in)]`, the usual convolution default.
pub fn uniform_fan_in<S: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor<S> {
    let bound = (1.0 / fan_in.max(1) as f64).sqrt();
    let data = (0..shape.iter().product::<usize>())
        .map(|_| S::of((rng.random::<f64>() * 2.0 - 1.0) * bound))
        .collect();
    Tensor::from_vec(shape, data)
}

/// Convolution weight `(cout, cin_g, kt, kh, kw)` with fan-in init.
pub fn conv_weight<S: Scalar>(
    rng: &mut ChaCha8Rng,
    cout: usize,
    cin_g: usize,
    kt: usize,
    kh: usize,
    kw: usize,
) -> Tensor<S> {
    uniform_fan_in(rng, &[cout, cin_g, kt, kh, kw], cin_g * kt * kh * kw)
}

pub fn zeros<S: Scalar>(shape: &[usize]) -> Tensor<S> {
    Tensor::zeros(shape)
}
