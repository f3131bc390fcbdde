//! Central-finite-difference gradient checking.
//!
//! The checker only ever evaluates the forward pass, so it is independent
//! of the reverse-mode path it is used to verify.

use crate::params::{GradMap, ParamStore};
use crate::tensor::Tensor;

/// Numerical gradient of `loss` w.r.t. every trainable scalar of `store`,
/// by central differences with step `h`.
pub fn finite_diff_grads<F>(store: &ParamStore, loss: F, h: f64) -> GradMap
where
    F: Fn(&ParamStore) -> f64,
{
    let mut out = GradMap::new();
    let names = store.trainable_names();
    for name in names {
        let shape = store.tensor(&name).unwrap().shape().to_vec();
        let numel: usize = shape.iter().product();
        let mut grad = vec![0.0; numel];
        for i in 0..numel {
            let mut plus = store.clone();
            plus.tensor_mut(&name).unwrap().data_mut()[i] += h;
            let mut minus = store.clone();
            minus.tensor_mut(&name).unwrap().data_mut()[i] -= h;
            grad[i] = (loss(&plus) - loss(&minus)) / (2.0 * h);
        }
        out.insert(name, Tensor::new(shape, grad));
    }
    out
}

/// Norm-wise relative error between two tensors of equal shape. Returns 0
/// when both are (numerically) zero.
pub fn relative_tensor_error(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.shape(), b.shape(), "relative_tensor_error shape mismatch");
    let diff: f64 = a
        .data()
        .iter()
        .zip(b.data().iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    let denom = a.frobenius_norm().max(b.frobenius_norm());
    if denom < 1e-10 {
        if diff < 1e-10 {
            0.0
        } else {
            f64::INFINITY
        }
    } else {
        diff / denom
    }
}
