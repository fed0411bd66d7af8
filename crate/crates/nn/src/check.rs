//! Central finite differences, the oracle for gradient checks.
//!
//! Nothing here touches the backward pass: the oracle only evaluates the
//! loss, so it stays independent of the code it checks.

use crate::Tensor;

/// Numerical gradient of `loss` with respect to every entry of `params`,
/// with perturbation `1e-5 * (1 + |x|)`.
pub fn numeric_gradient<F>(params: &mut [Tensor<f64>], mut loss: F) -> Vec<Tensor<f64>>
where
    F: FnMut(&[Tensor<f64>]) -> f64,
{
    let mut out: Vec<Tensor<f64>> = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
    for pi in 0..params.len() {
        for j in 0..params[pi].len() {
            let x = params[pi].data()[j];
            let h = 1e-5 * (1.0 + x.abs());
            params[pi].data_mut()[j] = x + h;
            let up = loss(params);
            params[pi].data_mut()[j] = x - h;
            let down = loss(params);
            params[pi].data_mut()[j] = x;
            out[pi].data_mut()[j] = (up - down) / (2.0 * h);
        }
    }
    out
}

/// Largest `|a - n| / max(|a|, |n|, floor)` over all entries.
///
/// `floor` keeps entries whose true gradient is zero from dominating.
pub fn max_relative_error(analytic: &[Tensor<f64>], numeric: &[Tensor<f64>], floor: f64) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .flat_map(|(a, n)| a.data().iter().zip(n.data()))
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}
