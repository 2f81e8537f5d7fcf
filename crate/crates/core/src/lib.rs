//! Block-permutation protection of biometric embeddings and the tooling to
//! measure how well it resists reversal: verification metrics, reversibility
//! sweeps, attribute-leakage probes and seed attacks.

pub mod attack;
pub mod cli;
pub mod data;
pub mod embedding;
pub mod error;
pub mod metrics;
pub mod permutation;
pub mod probe;
pub mod protection;

pub use embedding::{cosine_similarity, normalize, partition, BlockPartition, Embedding};
pub use error::{Error, Result};
pub use permutation::{protect, unprotect, BlockPermutation};
