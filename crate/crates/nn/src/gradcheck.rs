//! Central finite-difference validation of tape gradients.

use crate::tensor::Tensor;

/// Maximum relative error between an analytic gradient and central finite
/// differences of `loss_fn`, probing every element of `x0`.
/// `rel = |a - n| / max(|a|, |n|, floor)`.
pub fn max_rel_error(
    loss_fn: &mut dyn FnMut(&Tensor<f64>) -> f64,
    x0: &Tensor<f64>,
    analytic: &Tensor<f64>,
    h: f64,
    floor: f64,
) -> f64 {
    assert_eq!(x0.shape(), analytic.shape());
    let mut worst = 0.0f64;
    for i in 0..x0.numel() {
        let mut plus = x0.clone();
        plus.data_mut()[i] += h;
        let mut minus = x0.clone();
        minus.data_mut()[i] -= h;
        let numeric = (loss_fn(&plus) - loss_fn(&minus)) / (2.0 * h);
        let a = analytic.data()[i];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
        worst = worst.max(rel);
    }
    worst
}

/// Probe a deterministic subset of elements (stride sampling) for larger
/// tensors where the full sweep is unnecessary.
pub fn max_rel_error_sampled(
    loss_fn: &mut dyn FnMut(&Tensor<f64>) -> f64,
    x0: &Tensor<f64>,
    analytic: &Tensor<f64>,
    h: f64,
    floor: f64,
    samples: usize,
) -> f64 {
    assert_eq!(x0.shape(), analytic.shape());
    let n = x0.numel();
    let stride = (n / samples.min(n)).max(1);
    let mut worst = 0.0f64;
    let mut i = 0;
    while i < n {
        let mut plus = x0.clone();
        plus.data_mut()[i] += h;
        let mut minus = x0.clone();
        minus.data_mut()[i] -= h;
        let numeric = (loss_fn(&plus) - loss_fn(&minus)) / (2.0 * h);
        let a = analytic.data()[i];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
        worst = worst.max(rel);
        i += stride;
    }
    worst
}
