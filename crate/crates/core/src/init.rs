//! Random parameter initialisers.

use ccdnet_autograd::{Scalar, Tensor};
use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

pub fn normal<T: Scalar>(rng: &mut impl Rng, shape: &[usize], std: f64) -> Tensor<T> {
    let d = Normal::new(0.0, std).expect("finite std");
    Tensor::from_fn(shape, |_| T::from_f64_lossy(d.sample(rng)))
}

pub fn uniform<T: Scalar>(rng: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<T> {
    let d = Uniform::new(lo, hi).expect("non-empty range");
    Tensor::from_fn(shape, |_| T::from_f64_lossy(d.sample(rng)))
}

/// He-normal convolution kernel `(co, ci, k, k)`.
pub fn conv_he<T: Scalar>(rng: &mut impl Rng, co: usize, ci: usize, k: usize) -> Tensor<T> {
    normal(rng, &[co, ci, k, k], (2.0 / (ci * k * k) as f64).sqrt())
}

/// LeCun-normal convolution kernel, for layers not followed by ReLU.
pub fn conv_lecun<T: Scalar>(rng: &mut impl Rng, co: usize, ci: usize, k: usize) -> Tensor<T> {
    normal(rng, &[co, ci, k, k], (1.0 / (ci * k * k) as f64).sqrt())
}

pub fn linear_lecun<T: Scalar>(rng: &mut impl Rng, out: usize, inp: usize) -> Tensor<T> {
    normal(rng, &[out, inp], (1.0 / inp as f64).sqrt())
}
