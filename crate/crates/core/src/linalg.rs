//! Small dense-vector helpers.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub fn dot<F: Scalar>(a: &[F], b: &[F]) -> F {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

pub fn norm<F: Scalar>(a: &[F]) -> F {
    dot(a, a).sqrt()
}

/// Cosine similarity `a·b / (‖a‖‖b‖)`, clamped to [-1, 1].
pub fn cosine<F: Scalar>(a: &[F], b: &[F]) -> Result<F> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch(a.len(), b.len()));
    }
    let (na, nb) = (norm(a), norm(b));
    if !(na > F::zero()) || !(nb > F::zero()) || !na.is_finite() || !nb.is_finite() {
        return Err(Error::ZeroVector);
    }
    let c = dot(a, b) / (na * nb);
    Ok(c.max(-F::one()).min(F::one()))
}

/// Unit-length copy of `a`.
pub fn normalized<F: Scalar>(a: &[F]) -> Result<Vec<F>> {
    let n = norm(a);
    if !(n > F::zero()) || !n.is_finite() {
        return Err(Error::ZeroVector);
    }
    Ok(a.iter().map(|&x| x / n).collect())
}
