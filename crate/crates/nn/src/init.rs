//! Seed-controlled weight initialisers.

use rand::Rng;

use crate::{Scalar, Tensor};

/// Uniform in `±sqrt(6 / (fan_in + fan_out))`.
pub fn glorot_uniform<T: Scalar, R: Rng + ?Sized>(
    shape: &[usize],
    fan_in: usize,
    fan_out: usize,
    rng: &mut R,
) -> Tensor<T> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| T::of(rng.random_range(-limit..limit)))
        .collect();
    Tensor::new(shape.to_vec(), data).expect("length matches shape")
}

/// LSTM bias `[4H]` in i, f, g, o order: zeros except the forget gate at 1.
pub fn lstm_bias<T: Scalar>(hidden: usize) -> Tensor<T> {
    let mut t = Tensor::zeros(&[4 * hidden]);
    t.data_mut()[hidden..2 * hidden].fill(T::one());
    t
}
