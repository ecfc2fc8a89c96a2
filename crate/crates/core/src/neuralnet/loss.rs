use alloc::vec::Vec;

use super::tensor::{Scalar, Tensor};
use crate::{Error, Result};

fn rows<T: Scalar>(logits: &Tensor<T>) -> Result<(usize, usize)> {
    match logits.shape() {
        &[n, c] if c > 0 => Ok((n, c)),
        s => Err(Error::Dimension(alloc::format!("logits must be [batch, classes], got {s:?}"))),
    }
}

/// Row-wise softmax with max subtraction.
pub fn softmax<T: Scalar>(logits: &Tensor<T>) -> Result<Tensor<T>> {
    let (_, c) = rows(logits)?;
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.data().chunks_exact(c) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let start = out.len();
        let mut total = T::zero();
        for &v in row {
            let e = (v - max).exp();
            total += e;
            out.push(e);
        }
        for v in &mut out[start..] {
            *v = *v / total;
        }
    }
    Tensor::new(logits.shape().to_vec(), out)
}

/// Mean cross-entropy of softmax(logits) against integer labels, and its
/// gradient `(softmax - onehot) / batch`.
pub fn softmax_cross_entropy<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<(T, Tensor<T>)> {
    let (n, c) = rows(logits)?;
    if labels.len() != n {
        return Err(Error::Dimension(alloc::format!("{} labels for a batch of {n}", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::Config(alloc::format!("label {bad} out of range for {c} classes")));
    }
    let mut grad = softmax(logits)?;
    let scale = T::of(1.0 / n.max(1) as f64);
    let mut loss = T::zero();
    for ((row, g), &label) in logits.data().chunks_exact(c).zip(grad.data_mut().chunks_exact_mut(c)).zip(labels) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
        loss += lse - row[label];
        g[label] -= T::one();
        for v in g.iter_mut() {
            *v *= scale;
        }
    }
    Ok((loss * scale, grad))
}
