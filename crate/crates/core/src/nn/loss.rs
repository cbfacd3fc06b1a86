//! Loss functions returning the mean loss and its gradient w.r.t. the input.

use super::{Scalar, Tensor};

/// Mean squared error over all elements.
pub fn mse<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>) -> (f64, Tensor<T>) {
    assert_eq!(pred.shape(), target.shape(), "mse shape mismatch");
    let n = pred.data().len() as f64;
    let mut sum = 0.0f64;
    let scale = T::lit(2.0 / n);
    let mut grad = pred.clone();
    for (g, (&p, &t)) in grad.data_mut().iter_mut().zip(pred.data().iter().zip(target.data())) {
        let d = p - t;
        let df = d.to_f64().unwrap_or(0.0);
        sum += df * df;
        *g = d * scale;
    }
    (sum / n, grad)
}

/// Softmax cross-entropy averaged over the batch. `logits` is `[N, K, 1, 1]`.
pub fn cross_entropy<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> (f64, Tensor<T>) {
    let k = logits.sample_len();
    assert_eq!(logits.n(), labels.len(), "one label per sample");
    let n = labels.len() as f64;
    let mut grad = logits.clone();
    let mut total = 0.0f64;
    for (i, &label) in labels.iter().enumerate() {
        assert!(label < k, "label {label} out of range for {k} classes");
        let row: Vec<f64> = logits.sample(i).iter().map(|v| v.to_f64().unwrap_or(0.0)).collect();
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
        let lse = max + sum.ln();
        total += lse - row[label];
        for (j, g) in grad.sample_mut(i).iter_mut().enumerate() {
            let p = (row[j] - lse).exp();
            let t = if j == label { 1.0 } else { 0.0 };
            *g = T::lit((p - t) / n);
        }
    }
    (total / n, grad)
}

/// Numerically stable binary cross-entropy on logits, averaged over pixels.
pub fn bce_with_logits<T: Scalar>(logits: &Tensor<T>, targets: &Tensor<T>) -> (f64, Tensor<T>) {
    assert_eq!(logits.shape(), targets.shape(), "bce shape mismatch");
    let n = logits.data().len() as f64;
    let inv = T::lit(1.0 / n);
    let mut total = 0.0f64;
    let mut grad = logits.clone();
    for (g, (&z, &y)) in grad.data_mut().iter_mut().zip(logits.data().iter().zip(targets.data())) {
        let zf = z.to_f64().unwrap_or(0.0);
        let yf = y.to_f64().unwrap_or(0.0);
        total += zf.max(0.0) - zf * yf + (-zf.abs()).exp().ln_1p();
        *g = (super::layers::sigmoid(z) - y) * inv;
    }
    (total / n, grad)
}
