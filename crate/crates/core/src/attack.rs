//! Reversibility analysis: reconstruction channels, reversibility success rate
//! (RSR), block-size x displacement sweeps, and seed attacks.

use std::collections::HashMap;
use std::io::Write;

use itertools::Itertools;
use num_bigint::BigUint;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize, Serializer};

use crate::data::{Dataset, Pairing};
use crate::embedding::{cosine_similarity, normalize, partition, BlockPartition, Embedding};
use crate::error::{Error, Result};
use crate::metrics::{score_protocol, Comparator, OperatingPoint};
use crate::permutation::{
    check_displacement, factorial, sample_uniform_with, seeded_rng, unprotect, BlockPermutation,
};
use crate::protection::{key_permutation, protect_dataset, ProtectMode};

/// Stand-in for the attacker's inversion-and-re-extraction round trip.
#[derive(Debug, Clone, PartialEq)]
pub enum ReconstructionChannel {
    Identity,
    /// Adds i.i.d. `N(0, sigma^2)` noise per coordinate. Record `i` draws from
    /// ChaCha stream `i` of `seed`.
    Gaussian {
        sigma: f64,
        seed: u64,
        renormalize: bool,
    },
    /// Reconstructions supplied by an external tool, keyed by record id.
    External(HashMap<String, Embedding>),
}

impl ReconstructionChannel {
    pub fn gaussian(sigma: f64, seed: u64, renormalize: bool) -> Result<Self> {
        if !(sigma.is_finite() && sigma >= 0.0) {
            return Err(Error::InvalidSigma(sigma));
        }
        Ok(ReconstructionChannel::Gaussian {
            sigma,
            seed,
            renormalize,
        })
    }

    /// Reconstruction of record `id` (at position `index` of the attacked set).
    pub fn apply(&self, id: &str, index: u64, v: &Embedding) -> Result<Embedding> {
        match self {
            ReconstructionChannel::Identity => Ok(v.clone()),
            ReconstructionChannel::Gaussian { sigma, .. } if *sigma == 0.0 => Ok(v.clone()),
            ReconstructionChannel::Gaussian {
                sigma,
                seed,
                renormalize,
            } => {
                let mut rng = seeded_rng(*seed);
                rng.set_stream(index);
                let noisy: Vec<f32> = v
                    .as_slice()
                    .iter()
                    .map(|&x| {
                        let n: f64 = rng.sample(StandardNormal);
                        (x as f64 + sigma * n) as f32
                    })
                    .collect();
                let out = Embedding::new(noisy)?;
                if *renormalize {
                    normalize(&out)
                } else {
                    Ok(out)
                }
            }
            ReconstructionChannel::External(map) => map
                .get(id)
                .cloned()
                .ok_or_else(|| Error::ChannelGap(id.to_string())),
        }
    }

    pub fn describe(&self) -> String {
        match self {
            ReconstructionChannel::Identity => "identity".into(),
            ReconstructionChannel::Gaussian { sigma, .. } => format!("gaussian:{sigma}"),
            ReconstructionChannel::External(_) => "external".into(),
        }
    }
}

/// Source of the original (unprotected) embedding of each attacked record.
pub trait Originals: Sync {
    fn original(&self, id: &str) -> Option<&Embedding>;
}

impl Originals for Dataset {
    fn original(&self, id: &str) -> Option<&Embedding> {
        self.get(id).map(|r| &r.embedding)
    }
}

impl Originals for HashMap<String, Embedding> {
    fn original(&self, id: &str) -> Option<&Embedding> {
        self.get(id)
    }
}

/// Cosine between each record's reconstruction and its original, in record order.
pub fn reconstruction_scores<O: Originals>(
    protected: &Dataset,
    originals: &O,
    channel: &ReconstructionChannel,
) -> Result<Vec<f64>> {
    protected
        .records()
        .par_iter()
        .enumerate()
        .map(|(i, r)| {
            let original = originals
                .original(&r.id)
                .ok_or_else(|| Error::MissingOriginal(r.id.clone()))?;
            let reconstructed = channel.apply(&r.id, i as u64, &r.embedding)?;
            cosine_similarity(&reconstructed, original)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RsrOutcome {
    pub rsr: f64,
    pub accepted: usize,
    pub n_attacked: usize,
    pub threshold: f64,
}

fn rsr_from_scores(scores: &[f64], threshold: f64) -> Result<RsrOutcome> {
    if scores.is_empty() {
        return Err(Error::TooFewExamples("no records to attack".into()));
    }
    let accepted = scores.iter().filter(|&&s| s >= threshold).count();
    Ok(RsrOutcome {
        rsr: accepted as f64 / scores.len() as f64,
        accepted,
        n_attacked: scores.len(),
        threshold,
    })
}

/// Fraction of protected records whose reconstruction is accepted against its
/// original at `op.threshold`.
pub fn rsr<O: Originals>(
    protected: &Dataset,
    originals: &O,
    channel: &ReconstructionChannel,
    op: &OperatingPoint,
) -> Result<RsrOutcome> {
    let scores = reconstruction_scores(protected, originals, channel)?;
    rsr_from_scores(&scores, op.threshold)
}

/// Key material an attacker may hold.
#[derive(Debug, Clone, PartialEq)]
pub enum KeyMaterial {
    Permutation(BlockPermutation),
    /// The seed plus the public parameters needed to regenerate the permutation.
    Seed {
        partition: BlockPartition,
        displacement: Option<usize>,
        seed: u64,
    },
}

impl KeyMaterial {
    pub fn permutation(&self) -> Result<BlockPermutation> {
        match self {
            KeyMaterial::Permutation(p) => Ok(p.clone()),
            KeyMaterial::Seed {
                partition,
                displacement,
                seed,
            } => key_permutation(*partition, *displacement, *seed),
        }
    }
}

/// Inverts the protection with known key material and passes the result
/// through `channel`.
pub fn known_seed_attack(
    protected: &Embedding,
    key: &KeyMaterial,
    channel: &ReconstructionChannel,
    id: &str,
    index: u64,
) -> Result<Embedding> {
    let perm = key.permutation()?;
    if protected.dim() != perm.partition().dim() {
        return Err(Error::PartitionMismatch);
    }
    channel.apply(id, index, &unprotect(protected, &perm)?)
}

/// Candidate ordering for [`brute_force_attack`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "order")]
pub enum SearchOrder {
    /// Ascending displacement `P`; within `P`, moved subsets in lexicographic
    /// order, then derangements of the subset in lexicographic order.
    ExhaustiveByDisplacement,
    /// Uniform draws (with replacement) from the given seed.
    Random { seed: u64 },
}

fn big_as_string<S: Serializer>(v: &BigUint, s: S) -> std::result::Result<S::Ok, S::Error> {
    s.serialize_str(&v.to_string())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AttackReport {
    pub success: bool,
    pub best_score: f64,
    pub candidates_tried: u64,
    pub recovered_permutation: Option<BlockPermutation>,
    /// `N!`, exact; serialized as a decimal string.
    #[serde(serialize_with = "big_as_string")]
    pub search_space_size: BigUint,
    pub threshold: f64,
    pub budget: u64,
    #[serde(flatten)]
    pub order: SearchOrder,
}

/// Lexicographic derangements of `0..len`, generated directly (no filtering).
#[derive(Debug, Clone)]
pub struct Derangements {
    current: Vec<usize>,
    used: Vec<bool>,
    started: bool,
    done: bool,
}

impl Derangements {
    pub fn new(len: usize) -> Self {
        let mut d = Derangements {
            current: vec![usize::MAX; len],
            used: vec![false; len],
            started: false,
            done: len == 1,
        };
        if !d.done {
            let filled = d.fill(0);
            debug_assert!(filled);
        }
        d
    }

    /// Greedily completes positions `from..` with the smallest admissible values.
    /// Position `len - 2` must not leave value `len - 1` for the last slot.
    fn fill(&mut self, from: usize) -> bool {
        let len = self.current.len();
        if from + 1 == len {
            let last = (0..len).find(|&v| !self.used[v]).expect("one value left");
            if last == len - 1 {
                return false;
            }
            self.used[last] = true;
            self.current[from] = last;
            return true;
        }
        for i in from..len {
            let choice = (0..len).find(|&v| {
                !self.used[v] && v != i && !(i + 2 == len && v != len - 1 && !self.used[len - 1])
            });
            match choice {
                Some(v) => {
                    self.used[v] = true;
                    self.current[i] = v;
                }
                None => unreachable!("a derangement completion always exists for two or more slots"),
            }
        }
        true
    }

    fn advance(&mut self) -> bool {
        let len = self.current.len();
        for pos in (0..len).rev() {
            let cur = self.current[pos];
            self.used[cur] = false;
            for v in cur + 1..len {
                if v == pos || self.used[v] {
                    continue;
                }
                self.used[v] = true;
                self.current[pos] = v;
                if pos + 1 == len || self.fill(pos + 1) {
                    return true;
                }
                self.used[v] = false;
            }
        }
        false
    }
}

impl Iterator for Derangements {
    type Item = Vec<usize>;

    fn next(&mut self) -> Option<Vec<usize>> {
        if self.done {
            return None;
        }
        if self.started && !self.advance() {
            self.done = true;
            return None;
        }
        self.started = true;
        Some(self.current.clone())
    }
}

/// All block mappings on `n` blocks ordered by ascending displacement.
pub fn enumerate_by_displacement(n: usize) -> impl Iterator<Item = Vec<usize>> {
    std::iter::once(0)
        .chain(2..=n)
        .flat_map(move |p| {
            (0..n).combinations(p).flat_map(move |moved| {
                Derangements::new(p).map(move |d| {
                    let mut mapping: Vec<usize> = (0..n).collect();
                    for (i, &target) in moved.iter().enumerate() {
                        mapping[target] = moved[d[i]];
                    }
                    mapping
                })
            })
        })
}

const BATCH: usize = 4096;

/// Searches the permutation space for a guess whose inversion of `protected`
/// is accepted against `reference` at `op.threshold`.
///
/// Candidates are scored in parallel batches; the winner is always the accepted
/// candidate with the smallest enumeration index.
pub fn brute_force_attack(
    protected: &Embedding,
    reference: &Embedding,
    partition: BlockPartition,
    op: &OperatingPoint,
    budget: u64,
    order: SearchOrder,
) -> Result<AttackReport> {
    if budget == 0 {
        return Err(Error::InvalidConfig("budget must be at least 1".into()));
    }
    if protected.dim() != partition.dim() || reference.dim() != partition.dim() {
        return Err(Error::PartitionMismatch);
    }
    let n = partition.blocks();
    let space = factorial(n);
    let limit = match u64::try_from(&space) {
        Ok(s) => budget.min(s),
        Err(_) => budget,
    };

    let mut candidates: Box<dyn Iterator<Item = Vec<usize>>> = match order {
        SearchOrder::ExhaustiveByDisplacement => Box::new(enumerate_by_displacement(n)),
        SearchOrder::Random { seed } => {
            let mut rng = seeded_rng(seed);
            Box::new(std::iter::repeat_with(move || {
                sample_uniform_with(partition, &mut rng).mapping().to_vec()
            }))
        }
    };

    let mut tried: u64 = 0;
    let mut best_score = f64::NEG_INFINITY;
    while tried < limit {
        let take = (limit - tried).min(BATCH as u64) as usize;
        let batch: Vec<Vec<usize>> = candidates.by_ref().take(take).collect();
        if batch.is_empty() {
            break;
        }
        let scores: Vec<f64> = batch
            .par_iter()
            .map(|mapping| {
                let perm = BlockPermutation::from_mapping(partition, mapping.clone())?;
                cosine_similarity(&unprotect(protected, &perm)?, reference)
            })
            .collect::<Result<_>>()?;
        if let Some(hit) = scores.iter().position(|&s| s >= op.threshold) {
            best_score = scores[..=hit].iter().copied().fold(best_score, f64::max);
            let mapping = batch.into_iter().nth(hit).expect("hit index in batch");
            return Ok(AttackReport {
                success: true,
                best_score,
                candidates_tried: tried + hit as u64 + 1,
                recovered_permutation: Some(BlockPermutation::from_mapping(partition, mapping)?),
                search_space_size: space,
                threshold: op.threshold,
                budget,
                order,
            });
        }
        best_score = scores.iter().copied().fold(best_score, f64::max);
        tried += batch.len() as u64;
    }
    Ok(AttackReport {
        success: false,
        best_score,
        candidates_tried: tried,
        recovered_permutation: None,
        search_space_size: space,
        threshold: op.threshold,
        budget,
        order,
    })
}

/// Which displacements a fixed-permutation sweep visits for `N` blocks.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DisplacementSet {
    /// `2..=N`.
    Full,
    /// `2..=N`, except that 16-block partitions start at `P = 4`
    /// (the 13 + 7 + 3 row layout for K = 32, 64, 128 at S = 512).
    Standard,
    List(Vec<usize>),
}

impl DisplacementSet {
    pub fn values(&self, n: usize) -> Result<Vec<usize>> {
        let ps: Vec<usize> = match self {
            DisplacementSet::Full => (2..=n).collect(),
            DisplacementSet::Standard => {
                let start = if n == 16 { 4 } else { 2 };
                (start..=n).collect()
            }
            DisplacementSet::List(ps) => ps.clone(),
        };
        for &p in &ps {
            check_displacement(n, p)?;
        }
        Ok(ps)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SweepMode {
    /// Same permutation with exactly `P` displaced blocks for every record.
    Fixed(DisplacementSet),
    /// A uniformly random permutation per identity (one row per K, P reported as `uniform`).
    PerIdentity,
}

/// Where each sweep cell takes its decision thresholds from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Calibration {
    /// The per-identity protected system at each K.
    PerK,
    /// The protected dataset of each (K, P) cell.
    PerCell,
    /// The unprotected system, shared by all cells.
    Unprotected,
}

/// Channel description without per-run state.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum ChannelSpec {
    Identity,
    Gaussian { sigma: f64 },
}

impl ChannelSpec {
    pub fn build(&self, seed: u64, renormalize: bool) -> Result<ReconstructionChannel> {
        match self {
            ChannelSpec::Identity => Ok(ReconstructionChannel::Identity),
            ChannelSpec::Gaussian { sigma } => ReconstructionChannel::gaussian(*sigma, seed, renormalize),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub block_sizes: Vec<usize>,
    pub mode: SweepMode,
    pub channel: ChannelSpec,
    pub fmr_targets: Vec<f64>,
    pub calibration: Calibration,
    pub seed: u64,
}

impl SweepConfig {
    /// K = 32, 64, 128 with the standard displacement rows, identity channel,
    /// FMR targets 0.1 % and 1 %, per-K calibration.
    pub fn standard(seed: u64) -> Self {
        SweepConfig {
            block_sizes: vec![32, 64, 128],
            mode: SweepMode::Fixed(DisplacementSet::Standard),
            channel: ChannelSpec::Identity,
            fmr_targets: vec![0.001, 0.01],
            calibration: Calibration::PerK,
            seed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RsrRow {
    pub block_size: usize,
    /// `None` for per-identity uniform rows.
    pub displacement: Option<usize>,
    pub target_fmr: f64,
    pub threshold: f64,
    pub rsr: f64,
    pub accepted: usize,
    pub n_attacked: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RsrGrid {
    pub rows: Vec<RsrRow>,
}

impl RsrGrid {
    pub fn get(&self, block_size: usize, displacement: Option<usize>, target: f64) -> Option<&RsrRow> {
        self.rows.iter().find(|r| {
            r.block_size == block_size && r.displacement == displacement && r.target_fmr == target
        })
    }

    /// CSV with header `K,P,target_fmr,threshold,rsr,n_attacked,seed`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["K", "P", "target_fmr", "threshold", "rsr", "n_attacked", "seed"])?;
        for r in &self.rows {
            w.write_record([
                r.block_size.to_string(),
                r.displacement.map_or_else(|| "uniform".to_string(), |p| p.to_string()),
                r.target_fmr.to_string(),
                r.threshold.to_string(),
                r.rsr.to_string(),
                r.n_attacked.to_string(),
                r.seed.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

fn thresholds(dataset: &Dataset, pairing: &Pairing, targets: &[f64]) -> Result<Vec<f64>> {
    let scores = score_protocol(dataset, pairing, Comparator::Cosine)?;
    targets
        .iter()
        .map(|&t| Ok(scores.threshold_at_fmr(t)?.threshold))
        .collect()
}

/// RSR over every (K, P, target) cell. Rows are ordered by K as given, then P
/// ascending, then target as given.
pub fn rsr_sweep(dataset: &Dataset, pairing: &Pairing, config: &SweepConfig) -> Result<RsrGrid> {
    if config.fmr_targets.is_empty() {
        return Err(Error::InvalidConfig("no FMR targets".into()));
    }
    let channel = config.channel.build(config.seed, dataset.manifest().unit_norm)?;
    let unprotected_thresholds = match config.calibration {
        Calibration::Unprotected => Some(thresholds(dataset, pairing, &config.fmr_targets)?),
        _ => None,
    };

    let mut grid = RsrGrid::default();
    for &k in &config.block_sizes {
        let part = partition(dataset.dim(), k)?;
        let cells: Vec<Option<usize>> = match &config.mode {
            SweepMode::Fixed(set) => set.values(part.blocks())?.into_iter().map(Some).collect(),
            SweepMode::PerIdentity => vec![None],
        };
        let per_k_thresholds = match config.calibration {
            Calibration::PerK => {
                let (system, _) = protect_dataset(dataset, k, ProtectMode::PerIdentity, None, config.seed)?;
                Some(thresholds(&system, pairing, &config.fmr_targets)?)
            }
            _ => None,
        };
        for p in cells {
            let protect_mode = match config.mode {
                SweepMode::Fixed(_) => ProtectMode::Fixed,
                SweepMode::PerIdentity => ProtectMode::PerIdentity,
            };
            let (protected, _) = protect_dataset(dataset, k, protect_mode, p, config.seed)?;
            let cell_thresholds = match config.calibration {
                Calibration::PerCell => thresholds(&protected, pairing, &config.fmr_targets)?,
                Calibration::PerK => per_k_thresholds.clone().expect("computed per K"),
                Calibration::Unprotected => unprotected_thresholds.clone().expect("computed once"),
            };
            let scores = reconstruction_scores(&protected, dataset, &channel)?;
            for (&target, &threshold) in config.fmr_targets.iter().zip(&cell_thresholds) {
                let outcome = rsr_from_scores(&scores, threshold)?;
                grid.rows.push(RsrRow {
                    block_size: k,
                    displacement: p,
                    target_fmr: target,
                    threshold,
                    rsr: outcome.rsr,
                    accepted: outcome.accepted,
                    n_attacked: outcome.n_attacked,
                    seed: config.seed,
                });
            }
        }
    }
    Ok(grid)
}
