use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{shape_str, Tensor};

/// Probability clamp applied before taking logs.
pub const PROB_EPSILON: f64 = 1e-7;

/// Row-wise softmax of a `B×classes` tensor.
pub fn softmax<T: Scalar>(logits: &Tensor<T>) -> Result<Tensor<T>> {
    if logits.ndim() != 2 {
        return Err(Error::dim(format!("softmax needs B×classes, got {}", shape_str(logits.shape()))));
    }
    let n = logits.shape()[1];
    let mut data = logits.data().to_vec();
    for row in data.chunks_mut(n) {
        super::graph::softmax_in_place(row);
    }
    Tensor::new(logits.shape().to_vec(), data)
}

pub fn check_one_hot<T: Scalar>(labels: &Tensor<T>) -> Result<()> {
    if labels.ndim() != 2 {
        return Err(Error::Validation(format!("labels must be B×classes, got {}", shape_str(labels.shape()))));
    }
    for (r, row) in labels.data().chunks(labels.shape()[1]).enumerate() {
        let ones = row.iter().filter(|&&v| v == T::one()).count();
        let zeros = row.iter().filter(|&&v| v == T::zero()).count();
        if ones != 1 || ones + zeros != row.len() {
            return Err(Error::Validation(format!("label row {r} is not one-hot")));
        }
    }
    Ok(())
}

/// Mean categorical cross-entropy `−(1/B) Σ y·ln p`, with `p` clamped to
/// `[ε, 1−ε]`.
pub fn cross_entropy<T: Scalar>(probs: &Tensor<T>, labels: &Tensor<T>) -> Result<T> {
    probs.expect_same_shape(labels)?;
    check_one_hot(labels)?;
    let eps = T::lit(PROB_EPSILON);
    let hi = T::one() - eps;
    let mut total = T::zero();
    for (&p, &y) in probs.data().iter().zip(labels.data()) {
        if y != T::zero() {
            // NaN must survive the clamp so that divergence is detected.
            let q = if p.is_nan() { p } else { p.max(eps).min(hi) };
            total -= y * q.ln();
        }
    }
    Ok(total / T::lit(probs.batch() as f64))
}

pub fn one_hot<T: Scalar>(labels: &[usize], classes: usize) -> Result<Tensor<T>> {
    if labels.is_empty() {
        return Err(Error::Validation("no labels".into()));
    }
    let mut data = vec![T::zero(); labels.len() * classes];
    for (i, &l) in labels.iter().enumerate() {
        if l >= classes {
            return Err(Error::Validation(format!("label {l} out of range for {classes} classes")));
        }
        data[i * classes + l] = T::one();
    }
    Tensor::new(vec![labels.len(), classes], data)
}
