//! Flat parameter vectors and the handful of vector primitives the
//! aggregation rule, the attack and the detectors are written in.
//!
//! All reductions run left to right in `f64`; there is no pairwise or tree
//! summation, so results are bit-reproducible.

use std::ops::Index;

use crate::error::{Error, Result};

/// A flat model parameter vector. Never empty, never holds NaN or infinity.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector(Vec<f64>);

impl ParamVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::EmptyVector);
        }
        if let Some((index, &value)) = values.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            return Err(Error::NonFinite { index, value });
        }
        Ok(ParamVector(values))
    }

    pub fn zeros(dim: usize) -> Result<Self> {
        ParamVector::new(vec![0.0; dim])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn norm(&self) -> f64 {
        norm(&self.0)
    }

    pub fn dot(&self, other: &ParamVector) -> Result<f64> {
        check_dims(self.dim(), other.dim())?;
        Ok(dot(&self.0, &other.0))
    }

    /// `self - other`.
    pub fn sub(&self, other: &ParamVector) -> Result<ParamVector> {
        linear_combine(self, &[(-1.0, other)])
    }
}

impl Index<usize> for ParamVector {
    type Output = f64;

    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

impl TryFrom<Vec<f64>> for ParamVector {
    type Error = Error;

    fn try_from(values: Vec<f64>) -> Result<Self> {
        ParamVector::new(values)
    }
}

fn check_dims(expected: usize, actual: usize) -> Result<()> {
    if expected != actual {
        return Err(Error::DimensionMismatch { expected, actual });
    }
    Ok(())
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

pub(crate) fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// `‖a − b‖₂`.
pub fn euclidean_distance(a: &ParamVector, b: &ParamVector) -> Result<f64> {
    check_dims(a.dim(), b.dim())?;
    Ok(distance_slices(&a.0, &b.0))
}

pub(crate) fn distance_slices(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b) {
        let d = x - y;
        acc += d * d;
    }
    acc.sqrt()
}

/// Cosine of the angle between `a` and `b`, clamped to `[-1, 1]`.
///
/// Fails with [`Error::DegenerateVector`] when either operand has zero norm.
pub fn cosine_similarity(a: &ParamVector, b: &ParamVector) -> Result<f64> {
    check_dims(a.dim(), b.dim())?;
    cosine_slices(&a.0, &b.0)
}

pub(crate) fn cosine_slices(a: &[f64], b: &[f64]) -> Result<f64> {
    let na = norm(a);
    let nb = norm(b);
    if na == 0.0 || nb == 0.0 {
        return Err(Error::DegenerateVector);
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

/// `base + Σ coeffᵢ·vᵢ`, accumulated in list order.
pub fn linear_combine(base: &ParamVector, deltas: &[(f64, &ParamVector)]) -> Result<ParamVector> {
    for (_, v) in deltas {
        check_dims(base.dim(), v.dim())?;
    }
    let mut out = base.0.clone();
    for (coeff, v) in deltas {
        if *coeff == 0.0 {
            continue;
        }
        for (o, x) in out.iter_mut().zip(&v.0) {
            *o += coeff * x;
        }
    }
    ParamVector::new(out)
}
