use ndarray::{ArrayD, IxDyn};
use rand::Rng;

use crate::scalar::Scalar;

/// Uniform in `±sqrt(6 / fan_in)`; keeps activation variance stable behind a rectifier.
pub fn he_uniform<T: Scalar, R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> ArrayD<T> {
    let bound = (6.0 / fan_in.max(1) as f64).sqrt();
    ArrayD::from_shape_fn(IxDyn(shape), |_| T::lit(rng.gen_range(-bound..bound)))
}

/// Uniform in `±1 / sqrt(fan_in)`.
pub fn fan_in_uniform<T: Scalar, R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> ArrayD<T> {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    ArrayD::from_shape_fn(IxDyn(shape), |_| T::lit(rng.gen_range(-bound..bound)))
}
