//! Command-line surface: one subcommand per experiment stage.
//!
//! Every command writes its artifacts into `--out` together with `run.json`,
//! which records the seed, toolkit version and a SHA-256 digest of the
//! configuration. Nothing time-dependent is written, so re-running a command
//! with the same flags reproduces byte-identical outputs.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::Rng;
use serde::Serialize;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::attack::{
    brute_force_attack, known_seed_attack, rsr, rsr_sweep, AttackReport, Calibration, ChannelSpec,
    DisplacementSet, KeyMaterial, ReconstructionChannel, SearchOrder, SweepConfig, SweepMode,
};
use crate::data::{
    generate, load_pairing, read_dataset, write_dataset, Dataset, Format, Pairing, SynthSpec,
    TOOLKIT_VERSION,
};
use crate::embedding::{cosine_similarity, partition, Embedding};
use crate::error::{Error, Result};
use crate::metrics::{score_protocol, write_det_csv, Comparator, OperatingPoint};
use crate::permutation::{factorial, PRNG_ALGORITHM};
use crate::probe::{train_probe, ProbeHyper};
use crate::protection::{protect_dataset, PermutationLog, ProtectMode};

#[derive(Debug, Parser)]
#[command(name = "pemiu", version, about = "Block-permutation protection and reversibility analysis for biometric embeddings")]
pub struct Cli {
    /// Seed for every randomized step; drawn and recorded when omitted.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads (outputs do not depend on this).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Output directory.
    #[arg(short = 'o', long = "out", global = true, default_value = ".")]
    pub out: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic identity-cluster dataset.
    Generate(GenerateArgs),
    /// Protect a dataset with block permutations and log the keys.
    Protect(ProtectArgs),
    /// Score a dataset under a pairing: DET curve, EER, operating points (and RSR).
    Evaluate(EvaluateArgs),
    /// Reversibility success rate over block sizes and displacements.
    RsrSweep(SweepArgs),
    /// Known-seed inversion or brute-force permutation search on one record.
    AttackSeed(AttackArgs),
    /// Attribute-leakage probe trained on unprotected embeddings.
    Probe(ProbeArgs),
}

#[derive(Debug, Args, Serialize)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 500)]
    pub identities: usize,
    #[arg(long, default_value_t = 2)]
    pub samples: usize,
    /// Expected norm of the intra-class noise.
    #[arg(long, default_value_t = 0.1)]
    pub sigma: f64,
    #[arg(long, default_value_t = 0.5)]
    pub offset: f64,
    #[arg(long, default_value_t = 512)]
    pub dim: usize,
    /// Keep raw (non-normalized) embeddings.
    #[arg(long)]
    pub raw: bool,
}

impl SynthArgs {
    fn spec(&self, seed: u64) -> SynthSpec {
        SynthSpec {
            dim: self.dim,
            n_identities: self.identities,
            samples_per_identity: self.samples,
            intra_sigma: self.sigma,
            attribute_offset: self.offset,
            unit_norm: !self.raw,
            seed,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum FileFormat {
    Bin,
    Csv,
}

#[derive(Debug, Args, Serialize)]
pub struct GenerateArgs {
    #[command(flatten)]
    pub synth: SynthArgs,
    #[arg(long, value_enum, default_value_t = FileFormat::Bin)]
    pub format: FileFormat,
    /// Base file name inside the output directory.
    #[arg(long, default_value = "dataset")]
    pub name: String,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModeArg {
    PerIdentity,
    Fixed,
}

impl From<ModeArg> for ProtectMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::PerIdentity => ProtectMode::PerIdentity,
            ModeArg::Fixed => ProtectMode::Fixed,
        }
    }
}

#[derive(Debug, Args, Serialize)]
pub struct ProtectArgs {
    #[arg(short, long)]
    pub input: PathBuf,
    #[arg(long = "k")]
    pub block_size: usize,
    #[arg(long, value_enum)]
    pub mode: ModeArg,
    /// Exact number of displaced blocks (uniform over all permutations when omitted).
    #[arg(long = "p")]
    pub displacement: Option<usize>,
    #[arg(long, default_value = "protected")]
    pub name: String,
}

#[derive(Debug, Args, Serialize)]
pub struct EvaluateArgs {
    /// Dataset whose comparisons are scored (e.g. a protected dataset).
    #[arg(short, long)]
    pub input: PathBuf,
    /// Pairing CSV `id_a,id_b,mated`; all record pairs when omitted.
    #[arg(long)]
    pub pairing: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_values_t = vec![0.001, 0.01])]
    pub targets: Vec<f64>,
    /// Calibrate thresholds on this dataset (e.g. the unprotected system) instead of the input.
    #[arg(long)]
    pub threshold_system: Option<PathBuf>,
    /// Unprotected originals; enables RSR of the input against them.
    #[arg(long)]
    pub originals: Option<PathBuf>,
    /// `identity`, `gaussian:<sigma>` or `external:<dataset file>`.
    #[arg(long, default_value = "identity")]
    pub channel: String,
}

#[derive(Debug, Args, Serialize)]
pub struct SweepArgs {
    /// Unprotected dataset; a synthetic one is generated when omitted.
    #[arg(short, long)]
    pub input: Option<PathBuf>,
    #[command(flatten)]
    pub synth: SynthArgs,
    /// Seed of the generated dataset (defaults to --seed).
    #[arg(long)]
    pub data_seed: Option<u64>,
    #[arg(long, value_delimiter = ',', default_values_t = vec![32, 64, 128])]
    pub k: Vec<usize>,
    #[arg(long, value_enum, default_value_t = ModeArg::Fixed)]
    pub mode: ModeArg,
    /// `standard`, `full`, or a comma-separated list of displacements.
    #[arg(long = "p", default_value = "standard")]
    pub displacements: String,
    #[arg(long, default_value = "identity")]
    pub channel: String,
    #[arg(long, value_delimiter = ',', default_values_t = vec![0.001, 0.01])]
    pub targets: Vec<f64>,
    #[arg(long, value_enum, default_value_t = CalibrationArg::PerK)]
    pub calibration: CalibrationArg,
    #[arg(long)]
    pub pairing: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum CalibrationArg {
    PerK,
    PerCell,
    Unprotected,
}

impl From<CalibrationArg> for Calibration {
    fn from(c: CalibrationArg) -> Self {
        match c {
            CalibrationArg::PerK => Calibration::PerK,
            CalibrationArg::PerCell => Calibration::PerCell,
            CalibrationArg::Unprotected => Calibration::Unprotected,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttackMode {
    KnownSeed,
    BruteForce,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum OrderArg {
    Exhaustive,
    Random,
}

#[derive(Debug, Args, Serialize)]
pub struct AttackArgs {
    /// Protected dataset holding the attacked record.
    #[arg(long)]
    pub protected: PathBuf,
    #[arg(long)]
    pub record: String,
    /// Unprotected dataset holding the attacker's reference.
    #[arg(long)]
    pub references: PathBuf,
    /// Reference record id (defaults to the attacked record's id).
    #[arg(long)]
    pub reference: Option<String>,
    #[arg(long, value_enum)]
    pub mode: AttackMode,
    /// Permutation log from `protect` (known-seed mode).
    #[arg(long)]
    pub log: Option<PathBuf>,
    /// Block size (brute force, or known-seed without a log).
    #[arg(long = "k")]
    pub block_size: Option<usize>,
    /// Key seed to regenerate the permutation (known-seed without a log).
    #[arg(long)]
    pub key_seed: Option<u64>,
    #[arg(long = "p")]
    pub displacement: Option<usize>,
    #[arg(long, default_value_t = 1_000_000)]
    pub budget: u64,
    #[arg(long, value_enum, default_value_t = OrderArg::Exhaustive)]
    pub order: OrderArg,
    /// Fixed decision threshold; otherwise calibrated on the references at --target-fmr.
    #[arg(long)]
    pub threshold: Option<f64>,
    #[arg(long, default_value_t = 0.001)]
    pub target_fmr: f64,
    #[arg(long, default_value = "identity")]
    pub channel: String,
}

#[derive(Debug, Args, Serialize)]
pub struct ProbeArgs {
    /// Unprotected training set with binary attributes.
    #[arg(long)]
    pub train: PathBuf,
    /// Evaluation sets (same record ids as the training set).
    #[arg(long = "eval")]
    pub evals: Vec<PathBuf>,
    #[arg(long, default_value_t = 5)]
    pub folds: usize,
}

/// Parses `identity`, `gaussian:<sigma>` or `external:<path>`.
fn parse_channel(spec: &str, seed: u64, unit_norm: bool) -> Result<ReconstructionChannel> {
    match spec.split_once(':') {
        None if spec == "identity" => Ok(ReconstructionChannel::Identity),
        Some(("gaussian", s)) => {
            let sigma = s
                .parse::<f64>()
                .map_err(|_| Error::InvalidConfig(format!("bad gaussian sigma `{s}`")))?;
            ReconstructionChannel::gaussian(sigma, seed, unit_norm)
        }
        Some(("external", path)) => {
            let d = read_dataset(Path::new(path))?;
            Ok(ReconstructionChannel::External(
                d.records()
                    .iter()
                    .map(|r| (r.id.clone(), r.embedding.clone()))
                    .collect::<HashMap<String, Embedding>>(),
            ))
        }
        _ => Err(Error::InvalidConfig(format!("unknown channel `{spec}`"))),
    }
}

fn parse_channel_spec(spec: &str) -> Result<ChannelSpec> {
    match spec.split_once(':') {
        None if spec == "identity" => Ok(ChannelSpec::Identity),
        Some(("gaussian", s)) => {
            let sigma = s
                .parse::<f64>()
                .map_err(|_| Error::InvalidConfig(format!("bad gaussian sigma `{s}`")))?;
            if !(sigma.is_finite() && sigma >= 0.0) {
                return Err(Error::InvalidSigma(sigma));
            }
            Ok(ChannelSpec::Gaussian { sigma })
        }
        _ => Err(Error::InvalidConfig(format!(
            "sweeps support `identity` or `gaussian:<sigma>` channels, got `{spec}`"
        ))),
    }
}

fn parse_displacements(spec: &str) -> Result<DisplacementSet> {
    match spec {
        "standard" => Ok(DisplacementSet::Standard),
        "full" => Ok(DisplacementSet::Full),
        list => list
            .split(',')
            .map(|p| {
                p.trim()
                    .parse::<usize>()
                    .map_err(|_| Error::InvalidConfig(format!("bad displacement `{p}`")))
            })
            .collect::<Result<Vec<_>>>()
            .map(DisplacementSet::List),
    }
}

fn pairing_for(dataset: &Dataset, path: Option<&Path>) -> Result<Pairing> {
    match path {
        Some(p) => load_pairing(p, dataset),
        None => Ok(Pairing::all_pairs(dataset)),
    }
}

fn percent(rate: f64) -> String {
    format!("{}%", rate * 100.0)
}

struct Run<'a> {
    out: &'a Path,
    seed: Option<u64>,
    command: &'static str,
    config: Value,
    digest: String,
}

impl<'a> Run<'a> {
    fn new(out: &'a Path, seed: Option<u64>, command: &'static str, config: Value) -> Result<Self> {
        let canonical = serde_json::to_vec(&json!({"command": command, "seed": seed, "config": config}))?;
        let digest = Sha256::digest(&canonical).iter().map(|b| format!("{b:02x}")).collect();
        Ok(Run {
            out,
            seed,
            command,
            config,
            digest,
        })
    }

    fn seed(&self) -> u64 {
        self.seed.expect("seed resolved before dispatch")
    }

    fn stamp(&self) -> Value {
        json!({
            "command": self.command,
            "seed": self.seed,
            "toolkit_version": TOOLKIT_VERSION,
            "config_digest": self.digest,
        })
    }

    fn write(&self, name: &str, bytes: &[u8]) -> Result<PathBuf> {
        let path = self.out.join(name);
        fs::write(&path, bytes)?;
        Ok(path)
    }

    /// CSV preceded by a `#` line carrying the run stamp.
    fn write_csv(&self, name: &str, body: &[u8]) -> Result<PathBuf> {
        let mut bytes = format!(
            "# pemiu {} command={} seed={} config_digest={}\n",
            TOOLKIT_VERSION,
            self.command,
            self.seed.map_or("none".into(), |s| s.to_string()),
            self.digest
        )
        .into_bytes();
        bytes.extend_from_slice(body);
        self.write(name, &bytes)
    }

    /// JSON object with the run stamp under `"run"`.
    fn write_json<T: Serialize>(&self, name: &str, value: &T) -> Result<PathBuf> {
        let mut value = serde_json::to_value(value)?;
        if let Value::Object(map) = &mut value {
            map.insert("run".into(), self.stamp());
        }
        let mut text = serde_json::to_string_pretty(&value)?;
        text.push('\n');
        self.write(name, text.as_bytes())
    }

    /// `run.json`: the stamp plus the full configuration.
    fn record(&self) -> Result<()> {
        let mut stamp = self.stamp();
        stamp["prng"] = json!(PRNG_ALGORITHM);
        stamp["config"] = self.config.clone();
        let mut text = serde_json::to_string_pretty(&stamp)?;
        text.push('\n');
        self.write("run.json", text.as_bytes())?;
        Ok(())
    }
}

/// Runs a parsed command line. Errors map to exit codes via [`Error::exit_code`].
pub fn run(cli: Cli) -> Result<()> {
    if let Some(threads) = cli.threads {
        if threads == 0 {
            return Err(Error::InvalidConfig("--threads must be positive".into()));
        }
        // A pool may already exist when called repeatedly in-process; results do not depend on it.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global();
    }
    fs::create_dir_all(&cli.out)?;
    let needs_seed = !matches!(cli.command, Command::Evaluate(_)) || cli.seed.is_some();
    let seed = match cli.seed {
        Some(s) => Some(s),
        None if needs_seed => {
            let s: u64 = rand::rng().random();
            println!("seed: {s} (auto-generated)");
            Some(s)
        }
        None => None,
    };
    let (command, config) = match &cli.command {
        Command::Generate(a) => ("generate", serde_json::to_value(a)?),
        Command::Protect(a) => ("protect", serde_json::to_value(a)?),
        Command::Evaluate(a) => ("evaluate", serde_json::to_value(a)?),
        Command::RsrSweep(a) => ("rsr-sweep", serde_json::to_value(a)?),
        Command::AttackSeed(a) => ("attack-seed", serde_json::to_value(a)?),
        Command::Probe(a) => ("probe", serde_json::to_value(a)?),
    };
    let run = Run::new(&cli.out, seed, command, config)?;
    match &cli.command {
        Command::Generate(a) => cmd_generate(&run, a),
        Command::Protect(a) => cmd_protect(&run, a),
        Command::Evaluate(a) => cmd_evaluate(&run, a),
        Command::RsrSweep(a) => cmd_rsr_sweep(&run, a),
        Command::AttackSeed(a) => cmd_attack_seed(&run, a),
        Command::Probe(a) => cmd_probe(&run, a),
    }
}

fn cmd_generate(run: &Run, a: &GenerateArgs) -> Result<()> {
    let spec = a.synth.spec(run.seed());
    let dataset = generate(&spec)?;
    let (ext, format) = match a.format {
        FileFormat::Bin => ("pseb", Format::Binary),
        FileFormat::Csv => ("csv", Format::Csv),
    };
    let path = run.out.join(format!("{}.{ext}", a.name));
    write_dataset(&dataset, &path, format)?;
    run.record()?;
    println!("wrote {} records to {}", dataset.len(), path.display());
    Ok(())
}

fn cmd_protect(run: &Run, a: &ProtectArgs) -> Result<()> {
    let dataset = read_dataset(&a.input)?;
    let (protected, log) =
        protect_dataset(&dataset, a.block_size, a.mode.into(), a.displacement, run.seed())?;
    let path = run.out.join(format!("{}.pseb", a.name));
    write_dataset(&protected, &path, Format::Binary)?;
    run.write_json(&format!("{}.perm.json", a.name), &log)?;
    run.record()?;
    println!(
        "protected {} records with K={} ({} blocks, mode {}) -> {}",
        protected.len(),
        a.block_size,
        dataset.dim() / a.block_size,
        log.mode.as_str(),
        path.display()
    );
    Ok(())
}

fn cmd_evaluate(run: &Run, a: &EvaluateArgs) -> Result<()> {
    let dataset = read_dataset(&a.input)?;
    let pairing = pairing_for(&dataset, a.pairing.as_deref())?;
    let scores = score_protocol(&dataset, &pairing, Comparator::Cosine)?;
    let det = scores.det_curve()?;
    let eer = scores.eer()?;

    let calibration_scores = match &a.threshold_system {
        Some(path) => {
            let system = read_dataset(path)?;
            score_protocol(&system, &pairing, Comparator::Cosine)?
        }
        None => scores.clone(),
    };
    let originals = a.originals.as_deref().map(read_dataset).transpose()?;
    let channel = match &originals {
        Some(o) => Some(parse_channel(&a.channel, run.seed.unwrap_or(0), o.manifest().unit_norm)?),
        None => None,
    };

    let mut points = Vec::new();
    for &target in &a.targets {
        let calibrated = calibration_scores.threshold_at_fmr(target)?;
        let op = OperatingPoint {
            target_fmr: Some(target),
            ..scores.operating_point(calibrated.threshold)?
        };
        let mut entry = serde_json::to_value(op)?;
        entry["target_fmr_percent"] = json!(target * 100.0);
        if let (Some(o), Some(ch)) = (&originals, &channel) {
            let outcome = rsr(&dataset, o, ch, &op)?;
            entry["rsr"] = json!(outcome.rsr);
            entry["rsr_accepted"] = json!(outcome.accepted);
            entry["n_attacked"] = json!(outcome.n_attacked);
        }
        println!(
            "FMR target {} ({}): threshold {} FMR {} FNMR {}",
            target,
            percent(target),
            op.threshold,
            percent(op.fmr),
            op.fnmr.map_or("n/a".into(), percent)
        );
        points.push(entry);
    }
    let mut det_csv = Vec::new();
    write_det_csv(&det, &mut det_csv)?;
    run.write_csv("det.csv", &det_csv)?;
    run.write_json(
        "operating_points.json",
        &json!({
            "config_label": scores.config_label,
            "n_mated": scores.mated.len(),
            "n_non_mated": scores.non_mated.len(),
            "eer": eer,
            "eer_percent": eer.eer * 100.0,
            "operating_points": points,
        }),
    )?;
    run.record()?;
    println!("EER {} at threshold {}", percent(eer.eer), eer.threshold);
    Ok(())
}

fn cmd_rsr_sweep(run: &Run, a: &SweepArgs) -> Result<()> {
    let dataset = match &a.input {
        Some(path) => read_dataset(path)?,
        None => generate(&a.synth.spec(a.data_seed.unwrap_or(run.seed())))?,
    };
    let pairing = pairing_for(&dataset, a.pairing.as_deref())?;
    let mode = match a.mode {
        ModeArg::Fixed => SweepMode::Fixed(parse_displacements(&a.displacements)?),
        ModeArg::PerIdentity => SweepMode::PerIdentity,
    };
    let config = SweepConfig {
        block_sizes: a.k.clone(),
        mode,
        channel: parse_channel_spec(&a.channel)?,
        fmr_targets: a.targets.clone(),
        calibration: a.calibration.into(),
        seed: run.seed(),
    };
    let grid = rsr_sweep(&dataset, &pairing, &config)?;
    let mut csv = Vec::new();
    grid.write_csv(&mut csv)?;
    let path = run.write_csv("rsr.csv", &csv)?;
    run.record()?;
    for row in &grid.rows {
        println!(
            "K={:<4} P={:<8} FMR={:<7} RSR={}",
            row.block_size,
            row.displacement.map_or("uniform".into(), |p| p.to_string()),
            percent(row.target_fmr),
            percent(row.rsr)
        );
    }
    println!("wrote {} rows to {}", grid.rows.len(), path.display());
    Ok(())
}

fn cmd_attack_seed(run: &Run, a: &AttackArgs) -> Result<()> {
    let protected = read_dataset(&a.protected)?;
    let references = read_dataset(&a.references)?;
    let target = protected
        .get(&a.record)
        .ok_or_else(|| Error::UnknownRecord(a.record.clone()))?;
    let reference_id = a.reference.as_deref().unwrap_or(&a.record);
    let reference = references
        .get(reference_id)
        .ok_or_else(|| Error::MissingOriginal(reference_id.to_string()))?;

    let threshold = match a.threshold {
        Some(t) => t,
        None => {
            let scores = score_protocol(&references, &Pairing::all_pairs(&references), Comparator::Cosine)?;
            scores.threshold_at_fmr(a.target_fmr)?.threshold
        }
    };
    let op = OperatingPoint::at_threshold(threshold);

    let report: AttackReport = match a.mode {
        AttackMode::KnownSeed => {
            let key = match (&a.log, a.block_size, a.key_seed) {
                (Some(path), _, _) => {
                    let log: PermutationLog = serde_json::from_slice(&fs::read(path)?)?;
                    let perm = log
                        .permutation_for(&a.record)
                        .ok_or_else(|| Error::UnknownRecord(a.record.clone()))?;
                    KeyMaterial::Permutation(perm.clone())
                }
                (None, Some(k), Some(key_seed)) => KeyMaterial::Seed {
                    partition: partition(protected.dim(), k)?,
                    displacement: a.displacement,
                    seed: key_seed,
                },
                _ => {
                    return Err(Error::InvalidConfig(
                        "known-seed mode needs --log, or --k with --key-seed".into(),
                    ))
                }
            };
            let perm = key.permutation()?;
            let index = protected.index_of(&a.record).expect("record resolved") as u64;
            let channel = parse_channel(&a.channel, run.seed(), protected.manifest().unit_norm)?;
            let recovered = known_seed_attack(&target.embedding, &key, &channel, &a.record, index)?;
            let score = cosine_similarity(&recovered, &reference.embedding)?;
            AttackReport {
                success: score >= threshold,
                best_score: score,
                candidates_tried: 1,
                search_space_size: factorial(perm.blocks()),
                recovered_permutation: Some(perm),
                threshold,
                budget: 1,
                order: SearchOrder::ExhaustiveByDisplacement,
            }
        }
        AttackMode::BruteForce => {
            let k = a
                .block_size
                .ok_or_else(|| Error::InvalidConfig("brute-force mode needs --k".into()))?;
            let order = match a.order {
                OrderArg::Exhaustive => SearchOrder::ExhaustiveByDisplacement,
                OrderArg::Random => SearchOrder::Random { seed: run.seed() },
            };
            brute_force_attack(
                &target.embedding,
                &reference.embedding,
                partition(protected.dim(), k)?,
                &op,
                a.budget,
                order,
            )?
        }
    };
    let mut value: Value = serde_json::to_value(&report)?;
    value["mode"] = serde_json::to_value(a.mode)?;
    value["record"] = json!(a.record);
    value["reference"] = json!(reference_id);
    value["seed"] = json!(run.seed);
    run.write_json("attack.json", &value)?;
    run.record()?;
    println!(
        "success={} best_score={} candidates_tried={} search_space_size={}",
        report.success, report.best_score, report.candidates_tried, report.search_space_size
    );
    Ok(())
}

fn aligned(train: &Dataset, other: &Dataset) -> Result<(Vec<Embedding>, Vec<u8>)> {
    train
        .records()
        .iter()
        .map(|r| {
            let e = other
                .get(&r.id)
                .ok_or_else(|| Error::UnknownRecord(r.id.clone()))?;
            let label = e
                .attribute
                .ok_or_else(|| Error::MissingAttribute(e.id.clone()))?;
            Ok((e.embedding.clone(), label))
        })
        .collect::<Result<Vec<_>>>()
        .map(|v| v.into_iter().unzip())
}

fn cmd_probe(run: &Run, a: &ProbeArgs) -> Result<()> {
    let train = read_dataset(&a.train)?;
    let labels = train.attributes()?;
    let embeddings: Vec<Embedding> = train.records().iter().map(|r| r.embedding.clone()).collect();
    let cv = train_probe(&embeddings, &labels, a.folds, &ProbeHyper::default(), run.seed())?;
    let hyper = ProbeHyper::default();
    let with_meta = |report: &crate::probe::ProbeReport, source: &Path| -> Result<Value> {
        let mut v = serde_json::to_value(report)?;
        v["source"] = json!(source.display().to_string());
        v["hyper"] = serde_json::to_value(hyper)?;
        Ok(v)
    };
    run.write_json("probe_train.json", &with_meta(&cv.report, &a.train)?)?;
    println!("{}: {:.4} ± {:.4}", a.train.display(), cv.report.mean, cv.report.std);
    for (i, path) in a.evals.iter().enumerate() {
        let eval = read_dataset(path)?;
        let (xs, ys) = aligned(&train, &eval)?;
        let report = cv.evaluate_held_out(&xs, &ys)?;
        run.write_json(&format!("probe_eval_{i}.json"), &with_meta(&report, path)?)?;
        println!("{}: {:.4} ± {:.4}", path.display(), report.mean, report.std);
    }
    run.record()?;
    Ok(())
}
