//! Central finite-difference helpers for gradient verification.

use crate::tensor::Tensor;

/// Central finite differences of a scalar function w.r.t. every element.
pub fn finite_diff(
    x: &Tensor<f64>,
    eps: f64,
    f: impl Fn(&Tensor<f64>) -> f64,
) -> Tensor<f64> {
    let mut grad = Tensor::zeros(x.shape());
    for i in 0..x.numel() {
        let mut plus = x.clone();
        plus.data_mut()[i] += eps;
        let mut minus = x.clone();
        minus.data_mut()[i] -= eps;
        grad.data_mut()[i] = (f(&plus) - f(&minus)) / (2.0 * eps);
    }
    grad
}

/// Relative error between two gradients: max |a-b| / max(1e-8, max |a|, |b|).
///
/// Normalizing by the largest magnitude keeps the measure stable when
/// individual entries are near zero.
pub fn rel_error(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    assert_eq!(a.shape(), b.shape());
    let scale = a
        .data()
        .iter()
        .chain(b.data().iter())
        .fold(1e-8f64, |m, v| m.max(v.abs()));
    let diff = a
        .data()
        .iter()
        .zip(b.data().iter())
        .fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
    diff / scale
}
