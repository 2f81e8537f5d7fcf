//! Datasets: synthetic generation, binary and CSV storage, and pairing files.
//!
//! Binary layout (`PSEB`), all integers little-endian:
//!
//! ```text
//! magic "PSEB" | version u8 | flags u8 (bit0 = unit_norm) | S u32 | count u32
//! per record: id_len u32 | id (UTF-8) | identity u32 | attribute u8 | S x f32
//! ```
//!
//! An attribute byte of `255` marks a record without a binary attribute label.
//! Provenance lives in a JSON sidecar `<name>.manifest.json` next to the data file.

use std::collections::HashMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embedding::{normalize, Embedding, DEFAULT_DIM};
use crate::error::{Error, Result};
use crate::permutation::{seeded_rng, PRNG_ALGORITHM};

pub const MAGIC: &[u8; 4] = b"PSEB";
pub const FORMAT_VERSION: u8 = 1;
const FLAG_UNIT_NORM: u8 = 1;
const NO_ATTRIBUTE: u8 = 255;

pub const TOOLKIT_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub id: String,
    pub embedding: Embedding,
    pub identity: u32,
    /// Binary soft-biometric label, `None` when the source had none.
    pub attribute: Option<u8>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Provenance {
    Synthetic(SynthSpec),
    Import { path: String },
    Protected {
        source: String,
        block_size: usize,
        mode: String,
        seed: u64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    #[serde(rename = "S")]
    pub dim: usize,
    pub unit_norm: bool,
    pub provenance: Provenance,
    pub seed: Option<u64>,
    pub prng: String,
    pub toolkit_version: String,
}

impl Manifest {
    pub fn imported(dim: usize, unit_norm: bool, path: impl Into<String>) -> Self {
        Manifest {
            dim,
            unit_norm,
            provenance: Provenance::Import { path: path.into() },
            seed: None,
            prng: PRNG_ALGORITHM.to_string(),
            toolkit_version: TOOLKIT_VERSION.to_string(),
        }
    }

    /// Short tag for score sets built from this dataset.
    pub fn label(&self) -> String {
        match &self.provenance {
            Provenance::Synthetic(s) => format!("synthetic seed={}", s.seed),
            Provenance::Import { path } => format!("import {path}"),
            Provenance::Protected {
                block_size, mode, ..
            } => format!("K={block_size}, {mode}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    records: Vec<Record>,
    manifest: Manifest,
    index: HashMap<String, usize>,
}

impl Dataset {
    /// Checks id uniqueness, a common dimension matching the manifest, and unit norms when flagged.
    pub fn new(records: Vec<Record>, manifest: Manifest) -> Result<Self> {
        let mut index = HashMap::with_capacity(records.len());
        for (i, r) in records.iter().enumerate() {
            if r.embedding.dim() != manifest.dim {
                return Err(Error::DimensionMismatch {
                    expected: manifest.dim,
                    found: r.embedding.dim(),
                });
            }
            if index.insert(r.id.clone(), i).is_some() {
                return Err(Error::DuplicateRecordId(r.id.clone()));
            }
            if let Some(a) = r.attribute {
                if a > 1 {
                    return Err(Error::InvalidConfig(format!(
                        "record `{}` has attribute {a}, expected 0 or 1",
                        r.id
                    )));
                }
            }
            if manifest.unit_norm && !r.embedding.is_unit() {
                return Err(Error::InvalidConfig(format!(
                    "record `{}` is not unit-normalized (norm {})",
                    r.id,
                    r.embedding.norm()
                )));
            }
        }
        Ok(Dataset {
            records,
            manifest,
            index,
        })
    }

    pub fn records(&self) -> &[Record] {
        &self.records
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    pub fn dim(&self) -> usize {
        self.manifest.dim
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn get(&self, id: &str) -> Option<&Record> {
        self.index_of(id).map(|i| &self.records[i])
    }

    /// Binary attribute labels, failing on the first record without one.
    pub fn attributes(&self) -> Result<Vec<u8>> {
        self.records
            .iter()
            .map(|r| r.attribute.ok_or_else(|| Error::MissingAttribute(r.id.clone())))
            .collect()
    }

    /// Bitwise equality of records (including signed zeros) and manifest.
    pub fn bit_eq(&self, other: &Dataset) -> bool {
        self.manifest == other.manifest
            && self.records.len() == other.records.len()
            && self.records.iter().zip(&other.records).all(|(a, b)| {
                a.id == b.id
                    && a.identity == b.identity
                    && a.attribute == b.attribute
                    && a.embedding.bit_eq(&b.embedding)
            })
    }

    /// Same records with new embeddings (e.g. after protection).
    pub fn map_embeddings<F>(&self, manifest: Manifest, f: F) -> Result<Dataset>
    where
        F: Fn(usize, &Record) -> Result<Embedding> + Sync,
    {
        let records = self
            .records
            .par_iter()
            .enumerate()
            .map(|(i, r)| {
                Ok(Record {
                    id: r.id.clone(),
                    embedding: f(i, r)?,
                    identity: r.identity,
                    attribute: r.attribute,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Dataset::new(records, manifest)
    }
}

/// Parameters of the synthetic identity-cluster generator.
///
/// Each identity gets a centroid drawn uniformly on the unit sphere; each sample is
/// `centroid ± attribute_offset * u_attr + noise`, where the noise is i.i.d. Gaussian
/// with per-coordinate std `intra_sigma / sqrt(S)` (so its expected norm is about
/// `intra_sigma`), and `u_attr` is a fixed seed-derived unit direction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    #[serde(rename = "S")]
    pub dim: usize,
    pub n_identities: usize,
    pub samples_per_identity: usize,
    pub intra_sigma: f64,
    pub attribute_offset: f64,
    pub unit_norm: bool,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec::reference()
    }
}

impl SynthSpec {
    /// The reference desk-scale dataset: 500 identities x 2 samples, S = 512.
    pub fn reference() -> Self {
        SynthSpec {
            dim: DEFAULT_DIM,
            n_identities: 500,
            samples_per_identity: 2,
            intra_sigma: 0.1,
            attribute_offset: 0.5,
            unit_norm: true,
            seed: 7,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidSpec(msg.to_string()));
        if self.dim == 0 {
            return bad("dimension must be positive");
        }
        if self.n_identities < 2 {
            return bad("at least 2 identities are required");
        }
        if self.samples_per_identity < 1 {
            return bad("at least 1 sample per identity is required");
        }
        if !(self.intra_sigma.is_finite() && self.intra_sigma >= 0.0) {
            return bad("intra_sigma must be finite and >= 0");
        }
        if !self.attribute_offset.is_finite() {
            return bad("attribute_offset must be finite");
        }
        if self.n_identities > u32::MAX as usize {
            return bad("too many identities");
        }
        Ok(())
    }
}

fn gaussian_unit<R: Rng>(dim: usize, rng: &mut R) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

/// Identity `i` draws from ChaCha stream `i + 1`; stream 0 yields the attribute direction.
pub fn generate(spec: &SynthSpec) -> Result<Dataset> {
    spec.validate()?;
    let dim = spec.dim;
    let u_attr = gaussian_unit(dim, &mut seeded_rng(spec.seed));
    let noise_std = spec.intra_sigma / (dim as f64).sqrt();

    let per_identity: Vec<Vec<Record>> = (0..spec.n_identities)
        .into_par_iter()
        .map(|identity| {
            let mut rng = seeded_rng(spec.seed);
            rng.set_stream(identity as u64 + 1);
            let centroid = gaussian_unit(dim, &mut rng);
            let attribute = (identity % 2) as u8;
            let sign = if attribute == 1 { 1.0 } else { -1.0 };
            (0..spec.samples_per_identity)
                .map(|sample| {
                    let values: Vec<f32> = centroid
                        .iter()
                        .zip(&u_attr)
                        .map(|(c, u)| {
                            let noise: f64 = rng.sample(StandardNormal);
                            (c + sign * spec.attribute_offset * u + noise_std * noise) as f32
                        })
                        .collect();
                    let mut embedding = Embedding::new(values)?;
                    if spec.unit_norm {
                        embedding = normalize(&embedding)?;
                    }
                    Ok(Record {
                        id: format!("id{identity:05}_{sample}"),
                        embedding,
                        identity: identity as u32,
                        attribute: Some(attribute),
                    })
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;

    let manifest = Manifest {
        dim,
        unit_norm: spec.unit_norm,
        provenance: Provenance::Synthetic(spec.clone()),
        seed: Some(spec.seed),
        prng: PRNG_ALGORITHM.to_string(),
        toolkit_version: TOOLKIT_VERSION.to_string(),
    };
    Dataset::new(per_identity.into_iter().flatten().collect(), manifest)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Binary,
    Csv,
}

impl Format {
    /// `.csv` means CSV, anything else binary.
    pub fn from_path(path: &Path) -> Format {
        match path.extension().and_then(|e| e.to_str()) {
            Some(e) if e.eq_ignore_ascii_case("csv") => Format::Csv,
            _ => Format::Binary,
        }
    }
}

/// `data/ref.pseb` -> `data/ref.manifest.json`.
pub fn manifest_path(path: &Path) -> PathBuf {
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    path.with_file_name(format!("{stem}.manifest.json"))
}

pub fn write_dataset(dataset: &Dataset, path: &Path, format: Format) -> Result<()> {
    let file = BufWriter::new(fs::File::create(path)?);
    match format {
        Format::Binary => write_binary(dataset, file)?,
        Format::Csv => write_csv(dataset, file)?,
    }
    let manifest = serde_json::to_string_pretty(dataset.manifest())?;
    fs::write(manifest_path(path), manifest + "\n")?;
    Ok(())
}

/// Reads a dataset, picking the format from the extension and attaching the
/// sidecar manifest when present.
pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let bytes = fs::read(path)?;
    let sidecar = manifest_path(path);
    let manifest: Option<Manifest> = if sidecar.exists() {
        Some(serde_json::from_slice(&fs::read(&sidecar)?)?)
    } else {
        None
    };
    let label = path.display().to_string();
    match Format::from_path(path) {
        Format::Binary => decode_binary(&bytes, manifest, &label),
        Format::Csv => decode_csv(&bytes, manifest, &label),
    }
}

pub fn encode_binary(dataset: &Dataset) -> Vec<u8> {
    let mut buf = Vec::new();
    write_binary(dataset, &mut buf).expect("writing to a Vec cannot fail");
    buf
}

pub fn write_binary<W: Write>(dataset: &Dataset, mut w: W) -> Result<()> {
    w.write_all(MAGIC)?;
    let flags = if dataset.manifest.unit_norm {
        FLAG_UNIT_NORM
    } else {
        0
    };
    w.write_all(&[FORMAT_VERSION, flags])?;
    w.write_all(&(dataset.dim() as u32).to_le_bytes())?;
    w.write_all(&(dataset.len() as u32).to_le_bytes())?;
    for r in &dataset.records {
        w.write_all(&(r.id.len() as u32).to_le_bytes())?;
        w.write_all(r.id.as_bytes())?;
        w.write_all(&r.identity.to_le_bytes())?;
        w.write_all(&[r.attribute.unwrap_or(NO_ATTRIBUTE)])?;
        for x in r.embedding.as_slice() {
            w.write_all(&x.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn malformed(&self, offset: usize, reason: impl Into<String>) -> Error {
        Error::MalformedFile {
            offset: offset as u64,
            reason: reason.into(),
        }
    }

    /// Takes `n` bytes; a short read reports the offset where the field starts.
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let start = self.pos;
        if self.bytes.len() - start < n {
            return Err(self.malformed(start, format!("truncated {what}")));
        }
        self.pos += n;
        Ok(&self.bytes[start..start + n])
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().unwrap()))
    }
}

/// Decodes the binary form. Truncation and corruption surface as
/// [`Error::MalformedFile`] carrying the byte offset of the offending field.
pub fn decode_binary(bytes: &[u8], manifest: Option<Manifest>, source: &str) -> Result<Dataset> {
    let mut c = Cursor { bytes, pos: 0 };
    if c.take(4, "magic")? != MAGIC {
        return Err(c.malformed(0, "bad magic, expected PSEB"));
    }
    let version = c.u8("version")?;
    if version != FORMAT_VERSION {
        return Err(c.malformed(4, format!("unsupported version {version}")));
    }
    let flags = c.u8("flags")?;
    if flags & !FLAG_UNIT_NORM != 0 {
        return Err(c.malformed(5, format!("unknown flag bits {flags:#04x}")));
    }
    let unit_norm = flags & FLAG_UNIT_NORM != 0;
    let dim = c.u32("dimension")? as usize;
    if dim == 0 {
        return Err(c.malformed(6, "dimension is zero"));
    }
    let count = c.u32("record count")? as usize;

    let mut records = Vec::with_capacity(count.min(1 << 20));
    let mut seen = HashMap::with_capacity(count.min(1 << 20));
    for _ in 0..count {
        let id_len = c.u32("id length")? as usize;
        let id_at = c.pos;
        let id = std::str::from_utf8(c.take(id_len, "record id")?)
            .map_err(|_| c.malformed(id_at, "record id is not UTF-8"))?
            .to_string();
        if seen.insert(id.clone(), ()).is_some() {
            return Err(Error::DuplicateRecordId(id));
        }
        let identity = c.u32("identity label")?;
        let attr_at = c.pos;
        let attribute = match c.u8("attribute")? {
            NO_ATTRIBUTE => None,
            a @ (0 | 1) => Some(a),
            a => return Err(c.malformed(attr_at, format!("attribute byte {a}"))),
        };
        let mut values = Vec::with_capacity(dim);
        for _ in 0..dim {
            let at = c.pos;
            let x = f32::from_le_bytes(c.take(4, "embedding value")?.try_into().unwrap());
            if !x.is_finite() {
                return Err(c.malformed(at, "non-finite embedding value"));
            }
            values.push(x);
        }
        records.push(Record {
            id,
            embedding: Embedding::new(values)?,
            identity,
            attribute,
        });
    }
    if c.pos != bytes.len() {
        return Err(c.malformed(c.pos, "trailing bytes after last record"));
    }
    let manifest = reconcile(manifest, dim, unit_norm, source)?;
    Dataset::new(records, manifest)
}

fn reconcile(
    manifest: Option<Manifest>,
    dim: usize,
    unit_norm: bool,
    source: &str,
) -> Result<Manifest> {
    match manifest {
        None => Ok(Manifest::imported(dim, unit_norm, source)),
        Some(m) if m.dim != dim => Err(Error::DimensionMismatch {
            expected: m.dim,
            found: dim,
        }),
        Some(m) if m.unit_norm != unit_norm => Err(Error::InvalidConfig(format!(
            "manifest unit_norm={} disagrees with data file",
            m.unit_norm
        ))),
        Some(m) => Ok(m),
    }
}

pub fn write_csv<W: Write>(dataset: &Dataset, w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    let mut header = vec!["id".to_string(), "identity".into(), "attribute".into()];
    header.extend((0..dataset.dim()).map(|i| format!("v{i}")));
    out.write_record(&header)?;
    for r in &dataset.records {
        let mut row = Vec::with_capacity(dataset.dim() + 3);
        row.push(r.id.clone());
        row.push(r.identity.to_string());
        row.push(r.attribute.map(|a| a.to_string()).unwrap_or_default());
        // `Display` for f32 is the shortest string that parses back to the same bits.
        row.extend(r.embedding.as_slice().iter().map(|x| x.to_string()));
        out.write_record(&row)?;
    }
    out.flush()?;
    Ok(())
}

/// Parses the CSV form. The `attribute` column is optional.
pub fn decode_csv(bytes: &[u8], manifest: Option<Manifest>, source: &str) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new().flexible(true).from_reader(bytes);
    let header = rdr.headers()?.clone();
    let malformed = |offset: u64, reason: String| Error::MalformedFile { offset, reason };
    if header.get(0) != Some("id") || header.get(1) != Some("identity") {
        return Err(malformed(0, "header must start with id,identity".into()));
    }
    let has_attribute = header.get(2) == Some("attribute");
    let first_value = if has_attribute { 3 } else { 2 };
    let dim = header.len() - first_value;
    for (i, name) in header.iter().skip(first_value).enumerate() {
        if name != format!("v{i}") {
            return Err(malformed(0, format!("unexpected column `{name}`")));
        }
    }
    if dim == 0 {
        return Err(malformed(0, "no embedding columns".into()));
    }

    let mut records = Vec::new();
    for row in rdr.records() {
        let row = row?;
        let offset = row.position().map(|p| p.byte()).unwrap_or(0);
        if row.len() != header.len() {
            return Err(Error::DimensionMismatch {
                expected: dim,
                found: row.len().saturating_sub(first_value),
            });
        }
        let identity = row[1]
            .parse::<u32>()
            .map_err(|_| malformed(offset, format!("bad identity `{}`", &row[1])))?;
        let attribute = if has_attribute && !row[2].is_empty() {
            match &row[2] {
                "0" => Some(0),
                "1" => Some(1),
                a => return Err(malformed(offset, format!("bad attribute `{a}`"))),
            }
        } else {
            None
        };
        let values = row
            .iter()
            .skip(first_value)
            .map(|s| s.parse::<f32>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| malformed(offset, format!("bad embedding value: {e}")))?;
        let embedding =
            Embedding::new(values).map_err(|e| malformed(offset, e.to_string()))?;
        records.push(Record {
            id: row[0].to_string(),
            embedding,
            identity,
            attribute,
        });
    }
    let unit_norm = manifest.as_ref().is_some_and(|m| m.unit_norm);
    let manifest = reconcile(manifest, dim, unit_norm, source)?;
    Dataset::new(records, manifest)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Pair {
    pub id_a: String,
    pub id_b: String,
    pub mated: bool,
}

/// Ordered comparison protocol: which record pairs are scored and whether each is mated.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Pairing(Vec<Pair>);

impl Pairing {
    pub fn new(pairs: Vec<Pair>) -> Self {
        Pairing(pairs)
    }

    pub fn pairs(&self) -> &[Pair] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn mated_count(&self) -> usize {
        self.0.iter().filter(|p| p.mated).count()
    }

    /// Every unordered record pair `(i, j)`, `i < j`, in record order, mated iff identities agree.
    pub fn all_pairs(dataset: &Dataset) -> Pairing {
        let recs = dataset.records();
        let mut pairs = Vec::with_capacity(recs.len() * recs.len().saturating_sub(1) / 2);
        for (i, a) in recs.iter().enumerate() {
            for b in &recs[i + 1..] {
                pairs.push(Pair {
                    id_a: a.id.clone(),
                    id_b: b.id.clone(),
                    mated: a.identity == b.identity,
                });
            }
        }
        Pairing(pairs)
    }

    /// Record indices of each pair.
    pub fn resolve(&self, dataset: &Dataset) -> Result<Vec<(usize, usize)>> {
        let find = |id: &str| dataset.index_of(id).ok_or_else(|| Error::UnknownRecord(id.to_string()));
        self.0
            .iter()
            .map(|p| Ok((find(&p.id_a)?, find(&p.id_b)?)))
            .collect()
    }
}

/// Parses a pairing CSV (`id_a,id_b,mated`) and checks every id against `dataset`.
pub fn load_pairing(path: &Path, dataset: &Dataset) -> Result<Pairing> {
    let pairing = parse_pairing(&fs::read(path)?)?;
    pairing.resolve(dataset)?;
    Ok(pairing)
}

pub fn parse_pairing(bytes: &[u8]) -> Result<Pairing> {
    if bytes.iter().all(|b| b.is_ascii_whitespace()) {
        return Ok(Pairing::default());
    }
    let mut rdr = csv::ReaderBuilder::new().from_reader(bytes);
    let header = rdr.headers()?.clone();
    if header.iter().collect::<Vec<_>>() != ["id_a", "id_b", "mated"] {
        return Err(Error::MalformedFile {
            offset: 0,
            reason: "pairing header must be id_a,id_b,mated".into(),
        });
    }
    let mut pairs = Vec::new();
    for row in rdr.records() {
        let row = row?;
        let offset = row.position().map(|p| p.byte()).unwrap_or(0);
        let mated = match &row[2] {
            "0" => false,
            "1" => true,
            m => {
                return Err(Error::MalformedFile {
                    offset,
                    reason: format!("mated must be 0 or 1, got `{m}`"),
                })
            }
        };
        pairs.push(Pair {
            id_a: row[0].to_string(),
            id_b: row[1].to_string(),
            mated,
        });
    }
    Ok(Pairing(pairs))
}

pub fn write_pairing<W: Write>(pairing: &Pairing, w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["id_a", "id_b", "mated"])?;
    for p in pairing.pairs() {
        out.write_record([p.id_a.as_str(), p.id_b.as_str(), if p.mated { "1" } else { "0" }])?;
    }
    out.flush()?;
    Ok(())
}
