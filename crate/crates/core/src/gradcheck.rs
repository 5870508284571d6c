//! Central finite-difference gradient estimates, for checking hand-written
//! backward passes.

use crate::tensor::{Scalar, Tensor};

/// Default perturbation for 64-bit checks; balances stencil truncation
/// against round-off for the five-point formula.
pub const DEFAULT_STEP: f64 = 1e-4;

/// Step for whole networks: with many ReLU and max-pool inputs in play, the
/// stencil must stay closer to the point than the nearest kink.
pub const NETWORK_STEP: f64 = 1e-5;

/// Step for functions without kinks (no ReLU or max pooling in the path).
pub const SMOOTH_STEP: f64 = 1e-3;

/// Denominator floor in [`max_relative_error`]. Gradients smaller than this
/// compare by absolute error; it sits well above the stencil's round-off
/// (about 1e-12 for O(1) losses at the default step).
pub const RELATIVE_FLOOR: f64 = 1e-6;

/// Five-point central difference
/// `∂f/∂x_i ≈ (f(x − 2h) − 8f(x − h) + 8f(x + h) − f(x + 2h)) / 12h` for every element of `x`.
pub fn numeric_gradient(
    x: &Tensor<f64>,
    step: f64,
    mut f: impl FnMut(&Tensor<f64>) -> f64,
) -> Tensor<f64> {
    let mut probe = x.clone();
    let mut grad = Tensor::zeros(x.shape());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        let mut at = |offset: f64| {
            probe.data_mut()[i] = orig + offset;
            f(&probe)
        };
        let (m2, m1, p1, p2) = (at(-2.0 * step), at(-step), at(step), at(2.0 * step));
        probe.data_mut()[i] = orig;
        grad.data_mut()[i] = (m2 - 8.0 * m1 + 8.0 * p1 - p2) / (12.0 * step);
    }
    grad
}

/// `max_i |a_i − b_i| / max(|a_i|, |b_i|, RELATIVE_FLOOR)`.
pub fn max_relative_error<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> f64 {
    assert_eq!(a.shape(), b.shape(), "gradient shapes differ");
    a.data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let (x, y) = (x.as_f64(), y.as_f64());
            (x - y).abs() / x.abs().max(y.abs()).max(RELATIVE_FLOOR)
        })
        .fold(0.0, f64::max)
}

/// `Σ_i weights_i · y_i`: a scalar loss whose upstream gradient is `weights`.
pub fn projection(y: &Tensor<f64>, weights: &Tensor<f64>) -> f64 {
    y.data().iter().zip(weights.data()).map(|(a, b)| a * b).sum()
}
