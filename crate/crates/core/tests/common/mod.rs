//! Scalar-loop reference implementations shared by the integration suites.
//! Nothing here calls into the kernels it is used to check.
#![allow(dead_code)]

pub mod detect;
pub mod oracles;

use masf_core::rng::SplitMix64;
use masf_core::{Shape, Tensor};

pub fn random_tensor(rng: &mut SplitMix64, shape: Shape) -> Tensor {
    Tensor::from_fn(shape, |_, _, _, _| rng.uniform(-1.0, 1.0))
}

/// max |a − b| / max(1, |b|)
pub fn max_rel_err(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs() / y.abs().max(1.0))
        .fold(0.0, f64::max)
}
