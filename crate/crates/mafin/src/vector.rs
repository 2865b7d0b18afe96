//! Embedding vectors and the exact arithmetic every other module builds on.
//!
//! All arithmetic is f64 end-to-end with a fixed index-ascending summation
//! order, so identical inputs give bit-identical results across runs. A
//! vector caches its L2 norm at construction; the `normalized` flag is true
//! iff that norm is within [`UNIT_NORM_TOLERANCE`] of 1.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// How far an L2 norm may sit from 1 and still count as normalized.
pub const UNIT_NORM_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Error, PartialEq)]
pub enum VectorError {
    #[error("embedding vector must have at least one entry")]
    Empty,
    #[error("non-finite value at index {index}")]
    NonFinite { index: usize },
    #[error("dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },
    #[error("zero-norm vector (degenerate embedding)")]
    ZeroNorm,
    #[error("identifier must be a non-empty string")]
    EmptyId,
}

/// A fixed-dimension dense real vector with its norm recorded.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingVector {
    values: Vec<f64>,
    norm: f64,
    normalized: bool,
}

impl EmbeddingVector {
    /// Validates finiteness and non-emptiness; computes the norm once.
    pub fn new(values: Vec<f64>) -> Result<Self, VectorError> {
        if values.is_empty() {
            return Err(VectorError::Empty);
        }
        for (index, v) in values.iter().enumerate() {
            if !v.is_finite() {
                return Err(VectorError::NonFinite { index });
            }
        }
        let norm = l2_norm(&values);
        if !norm.is_finite() {
            return Err(VectorError::NonFinite { index: 0 });
        }
        let normalized = (norm - 1.0).abs() <= UNIT_NORM_TOLERANCE;
        Ok(Self { values, norm, normalized })
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn norm(&self) -> f64 {
        self.norm
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }
}

fn l2_norm(values: &[f64]) -> f64 {
    values.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Dot product with index-ascending summation.
pub fn dot(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64, VectorError> {
    if a.dim() != b.dim() {
        return Err(VectorError::DimensionMismatch { left: a.dim(), right: b.dim() });
    }
    let mut acc = 0.0;
    for i in 0..a.dim() {
        acc += a.values[i] * b.values[i];
    }
    Ok(acc)
}

/// Cosine similarity. When both inputs carry the normalized flag this is the
/// plain dot product; otherwise the dot product divided by both norms.
pub fn cosine(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<RelevanceScore, VectorError> {
    let d = dot(a, b)?;
    if a.normalized && b.normalized {
        return Ok(RelevanceScore(d));
    }
    if a.norm == 0.0 || b.norm == 0.0 {
        return Err(VectorError::ZeroNorm);
    }
    Ok(RelevanceScore(d / (a.norm * b.norm)))
}

/// Scale to unit norm. Errors on the zero vector; the caller owns the
/// degenerate-embedding policy.
pub fn l2_normalize(a: &EmbeddingVector) -> Result<EmbeddingVector, VectorError> {
    if a.norm == 0.0 {
        return Err(VectorError::ZeroNorm);
    }
    let values: Vec<f64> = a.values.iter().map(|v| v / a.norm).collect();
    EmbeddingVector::new(values)
}

/// A relevance score; cosine-derived scores lie in [-1, 1].
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
pub struct RelevanceScore(pub f64);

impl std::fmt::Display for RelevanceScore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

macro_rules! string_id {
    ($(#[$doc:meta])* $name:ident) => {
        $(#[$doc])*
        #[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
        #[serde(try_from = "String", into = "String")]
        pub struct $name(String);

        impl $name {
            pub fn new(id: impl Into<String>) -> Result<Self, VectorError> {
                let id = id.into();
                if id.is_empty() {
                    return Err(VectorError::EmptyId);
                }
                Ok(Self(id))
            }

            pub fn as_str(&self) -> &str {
                &self.0
            }
        }

        impl TryFrom<String> for $name {
            type Error = VectorError;
            fn try_from(s: String) -> Result<Self, VectorError> {
                Self::new(s)
            }
        }

        impl From<$name> for String {
            fn from(id: $name) -> String {
                id.0
            }
        }

        impl std::fmt::Display for $name {
            fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
                f.write_str(&self.0)
            }
        }
    };
}

string_id!(
    /// Opaque non-empty passage identifier.
    DocId
);
string_id!(
    /// Opaque non-empty query identifier.
    QueryId
);
