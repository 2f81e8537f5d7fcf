//! Block-permutation protection.
//!
//! A [`BlockPermutation`] maps output block `j` to input block `mapping[j]`:
//! `protect(v, π)` copies block `π(j)` of `v` into block `j` of the result.
//! Displacement `P` is the number of blocks that move (`π(j) != j`).

use num_bigint::BigUint;
use num_traits::{One, Zero};
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::embedding::{BlockPartition, Embedding};
use crate::error::{Error, Result};

/// Identifier of the generator behind every seeded draw, recorded in manifests.
pub const PRNG_ALGORITHM: &str = "chacha8 (rand_chacha 0.9, seed_from_u64)";

/// The seeded generator used throughout the toolkit.
pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "PermutationRecord", into = "PermutationRecord")]
pub struct BlockPermutation {
    partition: BlockPartition,
    mapping: Vec<usize>,
}

/// Wire form: `{"S": .., "K": .., "mapping": [..]}`.
#[derive(Serialize, Deserialize)]
struct PermutationRecord {
    #[serde(rename = "S")]
    dim: usize,
    #[serde(rename = "K")]
    block_size: usize,
    mapping: Vec<usize>,
}

impl TryFrom<PermutationRecord> for BlockPermutation {
    type Error = Error;

    fn try_from(r: PermutationRecord) -> Result<Self> {
        BlockPermutation::from_mapping(BlockPartition::new(r.dim, r.block_size)?, r.mapping)
    }
}

impl From<BlockPermutation> for PermutationRecord {
    fn from(p: BlockPermutation) -> Self {
        PermutationRecord {
            dim: p.partition.dim(),
            block_size: p.partition.block_size(),
            mapping: p.mapping,
        }
    }
}

impl BlockPermutation {
    pub fn identity(partition: BlockPartition) -> Self {
        BlockPermutation {
            partition,
            mapping: (0..partition.blocks()).collect(),
        }
    }

    /// Validates that `mapping` is a bijection on `0..N`.
    pub fn from_mapping(partition: BlockPartition, mapping: Vec<usize>) -> Result<Self> {
        let n = partition.blocks();
        if mapping.len() != n {
            return Err(Error::NotABijection(n));
        }
        let mut seen = vec![false; n];
        for &m in &mapping {
            if m >= n || std::mem::replace(&mut seen[m], true) {
                return Err(Error::NotABijection(n));
            }
        }
        Ok(BlockPermutation { partition, mapping })
    }

    /// Swaps blocks `a` and `b`.
    pub fn transposition(partition: BlockPartition, a: usize, b: usize) -> Result<Self> {
        let mut mapping: Vec<usize> = (0..partition.blocks()).collect();
        if a >= mapping.len() || b >= mapping.len() {
            return Err(Error::NotABijection(mapping.len()));
        }
        mapping.swap(a, b);
        Ok(BlockPermutation { partition, mapping })
    }

    pub fn partition(&self) -> BlockPartition {
        self.partition
    }

    pub fn mapping(&self) -> &[usize] {
        &self.mapping
    }

    pub fn blocks(&self) -> usize {
        self.mapping.len()
    }

    /// Number of blocks that leave their home position.
    pub fn displacement(&self) -> usize {
        self.mapping.iter().enumerate().filter(|(i, &m)| *i != m).count()
    }

    pub fn is_identity(&self) -> bool {
        self.displacement() == 0
    }

    pub fn invert(&self) -> BlockPermutation {
        let mut inverse = vec![0; self.mapping.len()];
        for (j, &m) in self.mapping.iter().enumerate() {
            inverse[m] = j;
        }
        BlockPermutation {
            partition: self.partition,
            mapping: inverse,
        }
    }

    /// The permutation that protects with `inner` and then with `self`:
    /// `protect(protect(v, inner), self) == protect(v, self.compose(inner))`.
    pub fn compose(&self, inner: &BlockPermutation) -> Result<BlockPermutation> {
        if self.partition != inner.partition {
            return Err(Error::PartitionMismatch);
        }
        Ok(BlockPermutation {
            partition: self.partition,
            mapping: self.mapping.iter().map(|&m| inner.mapping[m]).collect(),
        })
    }
}

/// Draws a permutation uniformly from all `N!` block permutations (Fisher-Yates).
pub fn sample_uniform(partition: BlockPartition, seed: u64) -> BlockPermutation {
    let mut rng = seeded_rng(seed);
    sample_uniform_with(partition, &mut rng)
}

pub fn sample_uniform_with<R: Rng + ?Sized>(
    partition: BlockPartition,
    rng: &mut R,
) -> BlockPermutation {
    let mut mapping: Vec<usize> = (0..partition.blocks()).collect();
    for i in (1..mapping.len()).rev() {
        let j = rng.random_range(0..=i);
        mapping.swap(i, j);
    }
    BlockPermutation { partition, mapping }
}

/// Draws uniformly among permutations that move exactly `p` blocks: a uniform
/// `p`-subset of blocks, then a uniform derangement of that subset.
pub fn sample_with_displacement(
    partition: BlockPartition,
    p: usize,
    seed: u64,
) -> Result<BlockPermutation> {
    let mut rng = seeded_rng(seed);
    sample_with_displacement_with(partition, p, &mut rng)
}

pub fn sample_with_displacement_with<R: Rng + ?Sized>(
    partition: BlockPartition,
    p: usize,
    rng: &mut R,
) -> Result<BlockPermutation> {
    let n = partition.blocks();
    check_displacement(n, p)?;
    let mut moved = index::sample(rng, n, p).into_vec();
    moved.sort_unstable();
    let shuffle = uniform_derangement(p, rng);
    let mut mapping: Vec<usize> = (0..n).collect();
    for (i, &target) in moved.iter().enumerate() {
        mapping[target] = moved[shuffle[i]];
    }
    Ok(BlockPermutation { partition, mapping })
}

pub(crate) fn check_displacement(n: usize, p: usize) -> Result<()> {
    if p == 1 || p > n {
        return Err(Error::InvalidDisplacement { p, n });
    }
    Ok(())
}

/// Fisher-Yates that restarts as soon as a finalized slot is a fixed point.
/// Each finalized prefix is uniform, so accepting only complete derangements
/// yields the uniform distribution over derangements.
fn uniform_derangement<R: Rng + ?Sized>(len: usize, rng: &mut R) -> Vec<usize> {
    if len == 0 {
        return Vec::new();
    }
    let mut a: Vec<usize> = Vec::with_capacity(len);
    'restart: loop {
        a.clear();
        a.extend(0..len);
        for i in (1..len).rev() {
            let j = rng.random_range(0..=i);
            a.swap(i, j);
            if a[i] == i {
                continue 'restart;
            }
        }
        if a[0] != 0 {
            return a;
        }
    }
}

/// Applies `perm` to `v`: block `j` of the output is block `perm[j]` of `v`.
pub fn protect(v: &Embedding, perm: &BlockPermutation) -> Result<Embedding> {
    let part = perm.partition;
    if v.dim() != part.dim() {
        return Err(Error::DimensionMismatch {
            expected: part.dim(),
            found: v.dim(),
        });
    }
    let src = v.as_slice();
    let mut out = Vec::with_capacity(src.len());
    for &m in &perm.mapping {
        out.extend_from_slice(&src[part.block(m)]);
    }
    Ok(Embedding::new(out).expect("permuted coordinates stay finite"))
}

/// Undoes [`protect`] for the same permutation.
pub fn unprotect(v_prime: &Embedding, perm: &BlockPermutation) -> Result<Embedding> {
    protect(v_prime, &perm.invert())
}

pub fn factorial(n: usize) -> BigUint {
    (1..=n as u64).fold(BigUint::one(), |acc, k| acc * k)
}

pub fn binomial(n: usize, k: usize) -> BigUint {
    if k > n {
        return BigUint::zero();
    }
    let k = k.min(n - k);
    // Each intermediate product of i consecutive integers is divisible by i!.
    (0..k as u64).fold(BigUint::one(), |acc, i| acc * (n as u64 - i) / (i + 1))
}

/// Derangement number `D(n)` via `D(n) = (n - 1)(D(n-1) + D(n-2))`.
pub fn derangements(n: usize) -> BigUint {
    let (mut prev, mut cur) = (BigUint::one(), BigUint::zero());
    if n == 0 {
        return prev;
    }
    for k in 2..=n as u64 {
        let next = (&prev + &cur) * (k - 1);
        prev = cur;
        cur = next;
    }
    cur
}

/// Number of permutations of `n` blocks moving exactly `p` of them: `C(n, p) * D(p)`.
pub fn count_with_displacement(n: usize, p: usize) -> BigUint {
    binomial(n, p) * derangements(p)
}
