use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::float::Float;
use crate::tensor::{numel, Tensor};

/// Trainable tensor with i.i.d. `N(0, std^2)` entries.
pub fn normal_param<T: Float, R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Tensor<T> {
    let dist = Normal::new(0.0, std).expect("finite std");
    let data = (0..numel(shape)).map(|_| T::from_f64(dist.sample(rng))).collect();
    Tensor::param(shape, data).expect("valid shape")
}

/// He-style init for a layer with `fan_in` inputs.
pub fn kaiming_param<T: Float, R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor<T> {
    normal_param(shape, (2.0 / fan_in as f64).sqrt(), rng)
}

pub fn zeros_param<T: Float>(shape: &[usize]) -> Tensor<T> {
    Tensor::param(shape, vec![T::zero(); numel(shape)]).expect("valid shape")
}

pub fn const_param<T: Float>(shape: &[usize], value: f64) -> Tensor<T> {
    Tensor::param(shape, vec![T::from_f64(value); numel(shape)]).expect("valid shape")
}
