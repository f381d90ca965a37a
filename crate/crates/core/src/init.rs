//! Weight initializers.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::tensor::{cast, Scalar, Tensor};

/// Uniform Glorot/Xavier: U(-a, a) with a = sqrt(6 / (fan_in + fan_out)).
pub fn glorot_uniform<T: Scalar, R: Rng + ?Sized>(rng: &mut R, shape: &[usize], fan_in: usize, fan_out: usize) -> Tensor<T> {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| cast(rng.random_range(-a..=a))).collect();
    Tensor::new(shape.to_vec(), data).expect("shape")
}

pub fn normal<T: Scalar, R: Rng + ?Sized>(rng: &mut R, shape: &[usize], std: f64) -> Tensor<T> {
    let dist = Normal::new(0.0, std).expect("finite std");
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| cast(dist.sample(rng))).collect();
    Tensor::new(shape.to_vec(), data).expect("shape")
}
