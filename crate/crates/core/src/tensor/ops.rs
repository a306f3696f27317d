//! Standalone categorical helpers shared by the graph and by decoding.

use super::{Result, Scalar, TensorError};

fn check_finite<T: Scalar>(op: &'static str, logits: &[T]) -> Result<()> {
    match logits.iter().position(|v| !v.is_finite()) {
        Some(node) => Err(TensorError::NonFinite { op, node }),
        None => Ok(()),
    }
}

/// Max-subtracted softmax.
pub fn softmax<T: Scalar>(logits: &[T]) -> Result<Vec<T>> {
    check_finite("softmax", logits)?;
    Ok(softmax_unchecked(logits))
}

pub(crate) fn softmax_unchecked<T: Scalar>(logits: &[T]) -> Vec<T> {
    let max = logits
        .iter()
        .copied()
        .fold(T::neg_infinity(), |a, b| a.max(b));
    let mut out: Vec<T> = logits.iter().map(|&v| (v - max).exp()).collect();
    let total: T = out.iter().copied().sum();
    for v in &mut out {
        *v = *v / total;
    }
    out
}

pub fn log_softmax<T: Scalar>(logits: &[T]) -> Result<Vec<T>> {
    check_finite("log_softmax", logits)?;
    let max = logits
        .iter()
        .copied()
        .fold(T::neg_infinity(), |a, b| a.max(b));
    let lse = logits.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
    Ok(logits.iter().map(|&v| v - lse).collect())
}

/// `-log softmax(logits)[target]`.
pub fn cross_entropy<T: Scalar>(logits: &[T], target: usize) -> Result<T> {
    if target >= logits.len() {
        return Err(TensorError::IndexOutOfRange {
            op: "cross_entropy",
            index: target,
            len: logits.len(),
        });
    }
    let logp = log_softmax(logits)?;
    // Clamp the tiny negative values rounding can produce.
    Ok((-logp[target]).max(T::zero()))
}
