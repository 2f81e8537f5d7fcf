//! Dataset-level protection and the permutation log that records it.
//!
//! Seeds for per-identity permutations are `seed + identity`, so any single
//! permutation can be regenerated from the log's seed without the log itself.

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Manifest, Provenance};
use crate::embedding::{partition, BlockPartition};
use crate::error::{Error, Result};
use crate::permutation::{
    protect, sample_uniform, sample_with_displacement, BlockPermutation, PRNG_ALGORITHM,
};

/// How permutations are assigned to records.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProtectMode {
    /// A different permutation per identity, drawn from `seed + identity`.
    PerIdentity,
    /// One permutation drawn from `seed`, shared by every record.
    Fixed,
}

impl ProtectMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            ProtectMode::PerIdentity => "per-identity",
            ProtectMode::Fixed => "fixed",
        }
    }
}

/// Permutation for one key: uniform over all `N!` or with exactly `displacement` moved blocks.
pub fn key_permutation(
    partition: BlockPartition,
    displacement: Option<usize>,
    seed: u64,
) -> Result<BlockPermutation> {
    match displacement {
        None => Ok(sample_uniform(partition, seed)),
        Some(p) => sample_with_displacement(partition, p, seed),
    }
}

/// Seed of the permutation applied to a record of `identity`.
pub fn record_seed(mode: ProtectMode, seed: u64, identity: u32) -> u64 {
    match mode {
        ProtectMode::PerIdentity => seed.wrapping_add(identity as u64),
        ProtectMode::Fixed => seed,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoggedPermutation {
    pub id: String,
    pub identity: u32,
    pub seed: u64,
    pub permutation: BlockPermutation,
}

/// Everything needed to undo a protection run: the stored key material.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PermutationLog {
    #[serde(rename = "S")]
    pub dim: usize,
    #[serde(rename = "K")]
    pub block_size: usize,
    pub mode: ProtectMode,
    pub displacement: Option<usize>,
    pub seed: u64,
    pub prng: String,
    pub records: Vec<LoggedPermutation>,
}

impl PermutationLog {
    pub fn permutation_for(&self, id: &str) -> Option<&BlockPermutation> {
        self.records.iter().find(|r| r.id == id).map(|r| &r.permutation)
    }
}

/// Protects every record of `dataset` with block size `block_size`.
pub fn protect_dataset(
    dataset: &Dataset,
    block_size: usize,
    mode: ProtectMode,
    displacement: Option<usize>,
    seed: u64,
) -> Result<(Dataset, PermutationLog)> {
    let part = partition(dataset.dim(), block_size)?;
    let fixed = match mode {
        ProtectMode::Fixed => Some(key_permutation(part, displacement, seed)?),
        ProtectMode::PerIdentity => {
            // Surface an invalid displacement even for an empty dataset.
            key_permutation(part, displacement, seed)?;
            None
        }
    };
    let perm_for = |identity: u32| -> Result<BlockPermutation> {
        match &fixed {
            Some(p) => Ok(p.clone()),
            None => key_permutation(part, displacement, record_seed(mode, seed, identity)),
        }
    };

    let mut log = Vec::with_capacity(dataset.len());
    for r in dataset.records() {
        log.push(LoggedPermutation {
            id: r.id.clone(),
            identity: r.identity,
            seed: record_seed(mode, seed, r.identity),
            permutation: perm_for(r.identity)?,
        });
    }
    let source = dataset.manifest();
    let manifest = Manifest {
        dim: source.dim,
        unit_norm: source.unit_norm,
        provenance: Provenance::Protected {
            source: source.label(),
            block_size,
            mode: mode.as_str().to_string(),
            seed,
        },
        seed: Some(seed),
        prng: PRNG_ALGORITHM.to_string(),
        toolkit_version: source.toolkit_version.clone(),
    };
    let protected = dataset.map_embeddings(manifest, |i, r| protect(&r.embedding, &log[i].permutation))?;
    Ok((
        protected,
        PermutationLog {
            dim: dataset.dim(),
            block_size,
            mode,
            displacement,
            seed,
            prng: PRNG_ALGORITHM.to_string(),
            records: log,
        },
    ))
}

/// Inverts a protection run using its log.
pub fn unprotect_dataset(protected: &Dataset, log: &PermutationLog) -> Result<Dataset> {
    let mut manifest = protected.manifest().clone();
    manifest.provenance = Provenance::Import {
        path: format!("unprotected K={} seed={}", log.block_size, log.seed),
    };
    protected.map_embeddings(manifest, |_, r| {
        let perm = log
            .permutation_for(&r.id)
            .ok_or_else(|| Error::UnknownRecord(r.id.clone()))?;
        crate::permutation::unprotect(&r.embedding, perm)
    })
}
