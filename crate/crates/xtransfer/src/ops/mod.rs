//! Differentiable tensor operators.
//!
//! Reverse-mode differentiation is done manually at operator granularity:
//! every op exposes `forward` and a `backward` that maps the output gradient
//! back to input and parameter gradients. The set is deliberately small —
//! convolution, dense, average pooling, bilinear resize, ReLU and a
//! softmax/cross-entropy head — which is all the layer units and connectors
//! need. All gradients are verified against central finite differences in
//! the test suites.

mod conv;
mod dense;
mod pool;
mod resize;

pub use conv::{Conv2d, Conv2dGrad};
pub use dense::{Dense, DenseGrad};
pub use pool::AvgPool2d;
pub use resize::{resize_bilinear, resize_bilinear_backward, resize_flops};

use crate::tensor::FeatureBatch;

/// Elementwise `max(0, x)`.
pub fn relu(input: &FeatureBatch) -> FeatureBatch {
    let mut out = input.clone();
    for v in out.data_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    out
}

/// Gradient of [`relu`]: passes `grad_out` where the forward input was
/// strictly positive.
pub fn relu_backward(input: &FeatureBatch, grad_out: &FeatureBatch) -> FeatureBatch {
    debug_assert_eq!(input.shape(), grad_out.shape());
    let mut grad_in = grad_out.clone();
    for (g, &x) in grad_in.data_mut().iter_mut().zip(input.data()) {
        if x <= 0.0 {
            *g = 0.0;
        }
    }
    grad_in
}

/// Elementwise sum of two batches with identical shape (residual merge).
pub fn add(a: &FeatureBatch, b: &FeatureBatch) -> FeatureBatch {
    debug_assert_eq!(a.shape(), b.shape());
    debug_assert_eq!(a.len(), b.len());
    let mut out = a.clone();
    for (o, &v) in out.data_mut().iter_mut().zip(b.data()) {
        *o += v;
    }
    out
}

/// Softmax + cross-entropy over a batch of logit vectors.
///
/// Returns the mean loss and the gradient w.r.t. the logits. Uses the
/// max-shift trick for numerical stability.
pub fn softmax_cross_entropy(logits: &[Vec<f64>], labels: &[usize]) -> (f64, Vec<Vec<f64>>) {
    assert_eq!(logits.len(), labels.len());
    assert!(!logits.is_empty());
    let n = logits.len() as f64;
    let mut loss = 0.0;
    let mut grads = Vec::with_capacity(logits.len());
    for (row, &label) in logits.iter().zip(labels) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|&v| (v - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        let p_label = exps[label] / sum;
        loss += -(p_label.max(1e-300)).ln();
        let grad: Vec<f64> = exps
            .iter()
            .enumerate()
            .map(|(j, &e)| (e / sum - if j == label { 1.0 } else { 0.0 }) / n)
            .collect();
        grads.push(grad);
    }
    (loss / n, grads)
}

/// Argmax prediction from logits.
pub fn argmax(row: &[f64]) -> usize {
    row.iter()
        .enumerate()
        .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
        .map(|(i, _)| i)
        .unwrap_or(0)
}

#[cfg(test)]
pub(crate) mod grad_check {
    //! Central finite-difference harness shared by operator tests.

    /// Numerical gradient of `f` w.r.t. `params` at the current values.
    pub fn finite_difference(
        params: &mut [f64],
        mut f: impl FnMut(&[f64]) -> f64,
        eps: f64,
    ) -> Vec<f64> {
        let mut grad = vec![0.0; params.len()];
        for i in 0..params.len() {
            let orig = params[i];
            params[i] = orig + eps;
            let plus = f(params);
            params[i] = orig - eps;
            let minus = f(params);
            params[i] = orig;
            grad[i] = (plus - minus) / (2.0 * eps);
        }
        grad
    }

    pub fn assert_close(analytic: &[f64], numeric: &[f64], tol: f64, what: &str) {
        assert_eq!(analytic.len(), numeric.len(), "{what}: length mismatch");
        for (i, (a, n)) in analytic.iter().zip(numeric).enumerate() {
            let scale = 1.0_f64.max(a.abs()).max(n.abs());
            assert!(
                (a - n).abs() / scale < tol,
                "{what}[{i}]: analytic {a} vs numeric {n}"
            );
        }
    }
}
