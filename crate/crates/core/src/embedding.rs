//! Embeddings, block partitioning and the cosine comparator.
//!
//! Coordinates are stored as `f32`; every reduction (dot products, norms)
//! accumulates in `f64` in index order so scores are reproducible.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Norms at or below this are treated as zero.
pub const ZERO_NORM: f64 = 1e-12;

/// Tolerance on the Euclidean norm of a unit-normalized embedding.
pub const UNIT_NORM_TOLERANCE: f64 = 1e-6;

/// Default embedding dimension (face embeddings of 512 floats).
pub const DEFAULT_DIM: usize = 512;

/// A fixed-dimension real feature vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f32>", into = "Vec<f32>")]
pub struct Embedding(Vec<f32>);

impl Embedding {
    /// Wraps `values`, rejecting empty vectors and non-finite coordinates.
    pub fn new(values: Vec<f32>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::EmptyEmbedding);
        }
        if let Some(i) = values.iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFinite(i));
        }
        Ok(Embedding(values))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.0
    }

    pub fn dot(&self, other: &Embedding) -> Result<f64> {
        check_dims(self.dim(), other.dim())?;
        Ok(dot(&self.0, &other.0))
    }

    /// Euclidean norm. Squares are summed in ascending order, so the result
    /// depends only on the multiset of coordinates and is bitwise invariant
    /// under any coordinate permutation.
    pub fn norm(&self) -> f64 {
        let mut squares: Vec<f64> = self.0.iter().map(|&x| x as f64 * x as f64).collect();
        squares.sort_unstable_by(f64::total_cmp);
        squares.iter().sum::<f64>().sqrt()
    }

    pub fn is_unit(&self) -> bool {
        (self.norm() - 1.0).abs() <= UNIT_NORM_TOLERANCE
    }

    /// Bitwise equality, distinguishing `0.0` from `-0.0`.
    pub fn bit_eq(&self, other: &Embedding) -> bool {
        self.0.len() == other.0.len()
            && self.0.iter().zip(&other.0).all(|(a, b)| a.to_bits() == b.to_bits())
    }

    /// Positive rescaling by `c`.
    pub fn scaled(&self, c: f32) -> Result<Embedding> {
        Embedding::new(self.0.iter().map(|x| x * c).collect())
    }
}

impl TryFrom<Vec<f32>> for Embedding {
    type Error = Error;

    fn try_from(values: Vec<f32>) -> Result<Self> {
        Embedding::new(values)
    }
}

impl From<Embedding> for Vec<f32> {
    fn from(e: Embedding) -> Self {
        e.0
    }
}

fn check_dims(expected: usize, found: usize) -> Result<()> {
    if expected != found {
        return Err(Error::DimensionMismatch { expected, found });
    }
    Ok(())
}

pub(crate) fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum()
}

/// Scales `v` to unit Euclidean norm.
pub fn normalize(v: &Embedding) -> Result<Embedding> {
    let norm = v.norm();
    if norm <= ZERO_NORM {
        return Err(Error::ZeroVector);
    }
    Embedding::new(v.0.iter().map(|&x| (x as f64 / norm) as f32).collect())
}

/// `dot(a, b) / (|a| |b|)`, clamped to `[-1, 1]`.
pub fn cosine_similarity(a: &Embedding, b: &Embedding) -> Result<f64> {
    check_dims(a.dim(), b.dim())?;
    cosine_from_parts(dot(&a.0, &b.0), dot(&a.0, &a.0), dot(&b.0, &b.0))
}

/// `ab / sqrt(aa * bb)`; exactly 1 when both vectors are bitwise equal.
pub(crate) fn cosine_from_parts(ab: f64, aa: f64, bb: f64) -> Result<f64> {
    if aa.sqrt() <= ZERO_NORM || bb.sqrt() <= ZERO_NORM {
        return Err(Error::ZeroVector);
    }
    Ok((ab / (aa * bb).sqrt()).clamp(-1.0, 1.0))
}

/// Splits an `S`-dimensional embedding into `N = S / K` contiguous blocks of `K` coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BlockPartition {
    dim: usize,
    block_size: usize,
}

impl BlockPartition {
    pub fn new(dim: usize, block_size: usize) -> Result<Self> {
        if dim == 0 || block_size == 0 {
            return Err(Error::ZeroBlockSize);
        }
        if !dim.is_multiple_of(block_size) {
            return Err(Error::IndivisibleBlockSize {
                dim,
                block: block_size,
            });
        }
        Ok(BlockPartition { dim, block_size })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn block_size(&self) -> usize {
        self.block_size
    }

    pub fn blocks(&self) -> usize {
        self.dim / self.block_size
    }

    /// Coordinate range covered by block `i`.
    pub fn block(&self, i: usize) -> Range<usize> {
        i * self.block_size..(i + 1) * self.block_size
    }
}

/// Shorthand for [`BlockPartition::new`].
pub fn partition(dim: usize, block_size: usize) -> Result<BlockPartition> {
    BlockPartition::new(dim, block_size)
}
