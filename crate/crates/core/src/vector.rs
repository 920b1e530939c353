//! Unit-norm embedding vectors and cosine similarity.
//!
//! All arithmetic is `f64`. Dot products are summed sequentially in index
//! order so results are reproducible bit-for-bit on a given platform.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::{Categorized, Category};

/// Norm below which a vector is treated as zero.
pub const ZERO_NORM: f64 = 1e-12;

/// Allowed deviation of a stored embedding's norm from 1.
pub const UNIT_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum VectorError {
    #[error("cannot normalize a zero vector (norm {norm:e})")]
    ZeroVector { norm: f64 },
    #[error("empty vector")]
    Empty,
    #[error("non-finite value at index {index}")]
    NonFinite { index: usize },
    #[error("dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },
    #[error("vector is not unit-norm (norm {norm})")]
    NotUnit { norm: f64 },
}

impl Categorized for VectorError {
    fn category(&self) -> Category {
        Category::Data
    }
}

/// A finite vector with Euclidean norm 1 (within [`UNIT_TOLERANCE`]).
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(transparent)]
pub struct EmbeddingVector(Vec<f64>);

impl EmbeddingVector {
    /// Wraps values that are already unit-norm, e.g. widened from a 32-bit store.
    pub fn from_unit(values: Vec<f64>) -> Result<Self, VectorError> {
        check_finite(&values)?;
        let norm = l2_norm(&values);
        if (norm - 1.0).abs() > UNIT_TOLERANCE {
            return Err(VectorError::NotUnit { norm });
        }
        Ok(Self(values))
    }

    pub fn from_unit_f32(values: &[f32]) -> Result<Self, VectorError> {
        Self::from_unit(values.iter().map(|&v| f64::from(v)).collect())
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

    pub fn to_f32(&self) -> Vec<f32> {
        self.0.iter().map(|&v| v as f32).collect()
    }

    /// Rounds every component through `f32`, the precision of the on-disk cache.
    pub fn quantized(&self) -> Self {
        Self(self.0.iter().map(|&v| f64::from(v as f32)).collect())
    }
}

impl<'de> Deserialize<'de> for EmbeddingVector {
    fn deserialize<D: serde::Deserializer<'de>>(de: D) -> Result<Self, D::Error> {
        let values = Vec::<f64>::deserialize(de)?;
        Self::from_unit(values).map_err(serde::de::Error::custom)
    }
}

/// Cosine similarity between two unit vectors.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SimilarityScore(pub f64);

impl SimilarityScore {
    pub fn value(self) -> f64 {
        self.0
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

fn l2_norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

fn check_finite(v: &[f64]) -> Result<(), VectorError> {
    if v.is_empty() {
        return Err(VectorError::Empty);
    }
    match v.iter().position(|x| !x.is_finite()) {
        Some(index) => Err(VectorError::NonFinite { index }),
        None => Ok(()),
    }
}

/// Scales `v` to unit Euclidean norm.
pub fn normalize(v: &[f64]) -> Result<EmbeddingVector, VectorError> {
    check_finite(v)?;
    let norm = l2_norm(v);
    if norm < ZERO_NORM {
        return Err(VectorError::ZeroVector { norm });
    }
    Ok(EmbeddingVector(v.iter().map(|x| x / norm).collect()))
}

pub fn normalize_f32(v: &[f32]) -> Result<EmbeddingVector, VectorError> {
    let wide: Vec<f64> = v.iter().map(|&x| f64::from(x)).collect();
    normalize(&wide)
}

/// Dot product of two unit vectors, summed in index order.
///
/// Symmetric exactly: each term `a[i] * b[i]` is commutative in IEEE 754 and
/// the summation order does not depend on operand order.
pub fn cosine_sim(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<SimilarityScore, VectorError> {
    if a.dim() != b.dim() {
        return Err(VectorError::DimensionMismatch {
            left: a.dim(),
            right: b.dim(),
        });
    }
    Ok(SimilarityScore(dot(&a.0, &b.0)))
}
