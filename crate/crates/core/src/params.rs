//! Flat parameter vectors.

use std::ops::{Index, IndexMut};

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Any coordinate above this magnitude is treated as divergence.
pub const DIVERGENCE_LIMIT: f64 = 1e12;

/// Flat parameter state of a model.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector<T> {
    values: Vec<T>,
}

impl<T: Scalar> ParamVector<T> {
    pub fn new(values: Vec<T>) -> Self {
        Self { values }
    }

    pub fn zeros(dim: usize) -> Self {
        Self {
            values: vec![T::zero(); dim],
        }
    }

    pub fn from_f64(values: &[f64]) -> Self {
        Self::new(values.iter().map(|&x| T::lit(x)).collect())
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn as_slice(&self) -> &[T] {
        &self.values
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.values
    }

    pub fn into_vec(self) -> Vec<T> {
        self.values
    }

    pub fn iter(&self) -> std::slice::Iter<'_, T> {
        self.values.iter()
    }

    pub fn dot(&self, other: &Self) -> T {
        debug_assert_eq!(self.dim(), other.dim());
        self.values
            .iter()
            .zip(&other.values)
            .fold(T::zero(), |acc, (&a, &b)| acc + a * b)
    }

    pub fn norm_sq(&self) -> T {
        self.dot(self)
    }

    pub fn norm(&self) -> T {
        self.norm_sq().sqrt()
    }

    pub fn max_abs(&self) -> T {
        self.values.iter().fold(
            T::zero(),
            |acc, &x| if x.abs() > acc { x.abs() } else { acc },
        )
    }

    /// `self += alpha * x`
    pub fn axpy(&mut self, alpha: T, x: &Self) {
        debug_assert_eq!(self.dim(), x.dim());
        for (s, &xi) in self.values.iter_mut().zip(&x.values) {
            *s = *s + alpha * xi;
        }
    }

    pub fn scale(&mut self, alpha: T) {
        for s in &mut self.values {
            *s = *s * alpha;
        }
    }

    pub fn scaled(&self, alpha: T) -> Self {
        let mut out = self.clone();
        out.scale(alpha);
        out
    }

    pub fn add(&self, other: &Self) -> Self {
        let mut out = self.clone();
        out.axpy(T::one(), other);
        out
    }

    pub fn sub(&self, other: &Self) -> Self {
        let mut out = self.clone();
        out.axpy(-T::one(), other);
        out
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|x| x.is_finite())
    }

    /// True when every coordinate is finite and below [`DIVERGENCE_LIMIT`].
    pub fn is_bounded(&self) -> bool {
        let limit = T::lit(DIVERGENCE_LIMIT);
        self.values
            .iter()
            .all(|x| x.is_finite() && x.abs() <= limit)
    }

    pub fn ensure_dim(&self, expected: usize) -> Result<()> {
        if self.dim() == expected {
            Ok(())
        } else {
            Err(Error::DimensionMismatch {
                expected,
                got: self.dim(),
            })
        }
    }

    /// SHA-256 of the little-endian coordinate bytes, hex encoded.
    pub fn digest(&self) -> String {
        let mut hasher = Sha256::new();
        for &x in &self.values {
            hasher.update(x.le_bytes());
        }
        hex::encode(hasher.finalize())
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.values.iter().map(|x| x.as_f64()).collect()
    }
}

impl<T> Index<usize> for ParamVector<T> {
    type Output = T;

    fn index(&self, i: usize) -> &T {
        &self.values[i]
    }
}

impl<T> IndexMut<usize> for ParamVector<T> {
    fn index_mut(&mut self, i: usize) -> &mut T {
        &mut self.values[i]
    }
}

impl<T: Scalar> From<Vec<T>> for ParamVector<T> {
    fn from(values: Vec<T>) -> Self {
        Self::new(values)
    }
}

/// Arithmetic mean of equally sized vectors, as a running mean in slice
/// order. A collection of identical vectors averages to that vector exactly.
pub fn mean_of<T: Scalar>(items: &[ParamVector<T>]) -> ParamVector<T> {
    assert!(!items.is_empty(), "mean of empty collection");
    let mut mean = items[0].clone();
    for (k, item) in items.iter().enumerate().skip(1) {
        let weight = T::one() / T::from_count(k + 1);
        for (m, &x) in mean.as_mut_slice().iter_mut().zip(item.as_slice()) {
            *m = *m + (x - *m) * weight;
        }
    }
    mean
}
