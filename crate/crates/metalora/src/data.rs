//! Synthetic multi-domain corpus generation and manifest ingestion.
//!
//! Every example is a `[seq_len, d_model]` feature sequence built from a
//! smooth random mixture of channel-spectrum harmonics. All sequences
//! carry a harmonic at the cue bin; spoof examples have that component
//! attenuated by `exp(-shared_cue_strength)` (a fixed spectral notch,
//! shared by every spoof class), and additionally carry their domain's
//! nuisance artifact. Bonafide examples carry neither. Held-out domains
//! combine the shared notch with artifact ids never seen in training, so
//! detectors that latch onto per-domain artifacts do not transfer.

use std::collections::HashSet;
use std::fmt;
use std::io::Read;
use std::path::{Path, PathBuf};

use once_cell::sync::OnceCell;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::rng::{fnv1a64, substream};
use crate::tensor::Tensor;

/// Channel-spectrum bin of the shared spoof cue.
pub const CUE_HARMONIC: usize = 5;
/// Bins available to the background mixture (cue bin excluded).
const BASE_HARMONICS: [usize; 6] = [1, 2, 3, 4, 6, 7];

pub const FEATURE_MAGIC: &[u8; 4] = b"MDGF";
pub const MANIFEST_HEADER: &str = "example_id,path,label,domain_id,split";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Bonafide,
    Spoof,
}

impl Label {
    pub fn as_int(self) -> u8 {
        match self {
            Label::Bonafide => 0,
            Label::Spoof => 1,
        }
    }

    pub fn from_str_int(s: &str) -> Result<Label, String> {
        match s.trim() {
            "0" => Ok(Label::Bonafide),
            "1" => Ok(Label::Spoof),
            other => Err(format!("unknown label `{other}` (expected 0 or 1)")),
        }
    }

    pub fn class_index(self) -> usize {
        self.as_int() as usize
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Label::Bonafide => f.write_str("bonafide"),
            Label::Spoof => f.write_str("spoof"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Dev,
    Eval,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Eval => "eval",
        }
    }

    pub fn from_str(s: &str) -> Result<Split, String> {
        match s.trim() {
            "train" => Ok(Split::Train),
            "dev" => Ok(Split::Dev),
            "eval" => Ok(Split::Eval),
            other => Err(format!("unknown split `{other}`")),
        }
    }
}

/// Parametric nuisance transform added to a domain's spoof examples.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArtifactKind {
    /// Temporal sinusoid with a fixed per-artifact channel signature.
    Harmonic { cycles: f64, amp: f64 },
    /// Per-channel AR(1) noise, normalized to stationary std `amp`.
    ArNoise { coef: f64, amp: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Artifact {
    pub id: u32,
    pub kind: ArtifactKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainSpec {
    pub domain_id: u32,
    pub spoof_artifact: Artifact,
    pub shared_cue_strength: f64,
    pub n_spoof: usize,
    pub n_bonafide: usize,
    pub noise_scale: f64,
}

/// Full description of a synthetic corpus; a pure function of
/// (spec, seed).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusSpec {
    pub seq_len: usize,
    pub d_model: usize,
    /// Fraction of each training domain's counts generated again as the
    /// validation (dev) pool.
    pub dev_fraction: f64,
    pub train: Vec<DomainSpec>,
    pub held_out: Vec<DomainSpec>,
}

impl CorpusSpec {
    /// Six training domains with distinct artifacts, two held-out domains
    /// with unseen artifacts.
    pub fn default_benchmark() -> CorpusSpec {
        let train_artifacts = [
            ArtifactKind::Harmonic { cycles: 2.0, amp: 1.2 },
            ArtifactKind::Harmonic { cycles: 3.0, amp: 1.2 },
            ArtifactKind::Harmonic { cycles: 4.0, amp: 1.2 },
            ArtifactKind::Harmonic { cycles: 6.0, amp: 1.2 },
            ArtifactKind::Harmonic { cycles: 8.0, amp: 1.2 },
            ArtifactKind::ArNoise { coef: 0.85, amp: 0.9 },
        ];
        let held_out_artifacts = [
            ArtifactKind::Harmonic { cycles: 12.0, amp: 1.2 },
            ArtifactKind::ArNoise { coef: 0.6, amp: 0.9 },
        ];
        let spec = |domain_id: u32, artifact_id: u32, kind: ArtifactKind, n: usize| DomainSpec {
            domain_id,
            spoof_artifact: Artifact {
                id: artifact_id,
                kind,
            },
            shared_cue_strength: 0.9,
            n_spoof: n,
            n_bonafide: n,
            noise_scale: 0.8,
        };
        CorpusSpec {
            seq_len: 32,
            d_model: 16,
            dev_fraction: 0.25,
            train: train_artifacts
                .iter()
                .enumerate()
                .map(|(i, &k)| spec(i as u32 + 1, i as u32 + 1, k, 40))
                .collect(),
            held_out: held_out_artifacts
                .iter()
                .enumerate()
                .map(|(i, &k)| spec(i as u32 + 101, i as u32 + 7, k, 60))
                .collect(),
        }
    }

    /// Stable content hash for receipts and checkpoint headers.
    pub fn content_hash(&self) -> u64 {
        fnv1a64(serde_json::to_string(self).expect("spec serializes").as_bytes())
    }
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self::default_benchmark()
    }
}

#[derive(Debug)]
enum FeatureSource {
    Memory(Tensor),
    File { path: PathBuf, cell: OnceCell<Tensor> },
}

impl Clone for FeatureSource {
    fn clone(&self) -> Self {
        match self {
            FeatureSource::Memory(t) => FeatureSource::Memory(t.clone()),
            FeatureSource::File { path, cell } => FeatureSource::File {
                path: path.clone(),
                cell: cell.clone(),
            },
        }
    }
}

#[derive(Debug, Clone)]
pub struct Example {
    pub example_id: String,
    pub label: Label,
    pub domain_id: u32,
    source: FeatureSource,
}

impl Example {
    pub fn in_memory(example_id: String, label: Label, domain_id: u32, features: Tensor) -> Self {
        Example {
            example_id,
            label,
            domain_id,
            source: FeatureSource::Memory(features),
        }
    }

    /// Feature tensor; file-backed examples load on first access.
    pub fn features(&self) -> Result<&Tensor, DataError> {
        match &self.source {
            FeatureSource::Memory(t) => Ok(t),
            FeatureSource::File { path, cell } => {
                cell.get_or_try_init(|| read_feature_file(path))
            }
        }
    }
}

/// A pool of labeled examples per domain.
#[derive(Debug, Clone, Default)]
pub struct Domain {
    pub domain_id: u32,
    pub examples: Vec<Example>,
}

#[derive(Debug, Clone, Default)]
pub struct DomainSet {
    pub domains: Vec<Domain>,
}

impl DomainSet {
    pub fn total_examples(&self) -> usize {
        self.domains.iter().map(|d| d.examples.len()).sum()
    }

    pub fn all_examples(&self) -> impl Iterator<Item = &Example> {
        self.domains.iter().flat_map(|d| d.examples.iter())
    }

    fn domain_mut(&mut self, domain_id: u32) -> &mut Domain {
        if let Some(i) = self.domains.iter().position(|d| d.domain_id == domain_id) {
            return &mut self.domains[i];
        }
        self.domains.push(Domain {
            domain_id,
            examples: Vec::new(),
        });
        self.domains.last_mut().unwrap()
    }

    /// Equality over ids, labels, domains, and feature payload bits
    /// (forces lazy features to load).
    pub fn value_eq(&self, other: &DomainSet) -> Result<bool, DataError> {
        if self.domains.len() != other.domains.len() {
            return Ok(false);
        }
        for (a, b) in self.domains.iter().zip(other.domains.iter()) {
            if a.domain_id != b.domain_id || a.examples.len() != b.examples.len() {
                return Ok(false);
            }
            for (x, y) in a.examples.iter().zip(b.examples.iter()) {
                if x.example_id != y.example_id
                    || x.label != y.label
                    || x.domain_id != y.domain_id
                {
                    return Ok(false);
                }
                let (fx, fy) = (x.features()?, y.features()?);
                if fx.shape() != fy.shape()
                    || fx
                        .data()
                        .iter()
                        .zip(fy.data().iter())
                        .any(|(p, q)| p.to_bits() != q.to_bits())
                {
                    return Ok(false);
                }
            }
        }
        Ok(true)
    }
}

/// Train/dev pools come from the training domains; eval from the
/// held-out domains only.
#[derive(Debug, Clone, Default)]
pub struct Corpus {
    pub train: DomainSet,
    pub dev: DomainSet,
    pub eval: DomainSet,
}

impl Corpus {
    pub fn split(&self, split: Split) -> &DomainSet {
        match split {
            Split::Train => &self.train,
            Split::Dev => &self.dev,
            Split::Eval => &self.eval,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum DataError {
    Validation(String),
    OverlappingArtifact { id: u32 },
    DuplicateExampleId { row: usize, id: String },
    UnknownLabel { row: usize, value: String },
    UnknownSplit { row: usize, value: String },
    MissingFeatureFile { row: usize, path: PathBuf },
    BadRow { row: usize, message: String },
    FeatureFile { path: PathBuf, message: String },
    Io(String),
}

impl fmt::Display for DataError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DataError::Validation(s) => write!(f, "invalid corpus spec: {s}"),
            DataError::OverlappingArtifact { id } => {
                write!(f, "artifact id {id} appears in both train and held-out specs")
            }
            DataError::DuplicateExampleId { row, id } => {
                write!(f, "manifest row {row}: duplicate example_id `{id}`")
            }
            DataError::UnknownLabel { row, value } => {
                write!(f, "manifest row {row}: unknown label `{value}`")
            }
            DataError::UnknownSplit { row, value } => {
                write!(f, "manifest row {row}: unknown split `{value}`")
            }
            DataError::MissingFeatureFile { row, path } => {
                write!(f, "manifest row {row}: feature file not found: {}", path.display())
            }
            DataError::BadRow { row, message } => write!(f, "manifest row {row}: {message}"),
            DataError::FeatureFile { path, message } => {
                write!(f, "feature file {}: {message}", path.display())
            }
            DataError::Io(e) => write!(f, "i/o error: {e}"),
        }
    }
}

impl std::error::Error for DataError {}

impl From<std::io::Error> for DataError {
    fn from(e: std::io::Error) -> Self {
        DataError::Io(e.to_string())
    }
}

/// Fixed per-artifact channel signature: a pseudo-random vector with its
/// cue-bin components projected out, so artifacts never carry energy at
/// the shared cue harmonic. Scaled to the norm of a unit-amplitude
/// channel harmonic.
fn artifact_signature(id: u32, d: usize) -> Vec<f64> {
    let mut rng = substream(id as u64, "artifact.signature");
    let mut u: Vec<f64> = (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    let (sin_b, cos_b) = cue_basis(d);
    for basis in [&sin_b, &cos_b] {
        let dot: f64 = u.iter().zip(basis.iter()).map(|(a, b)| a * b).sum();
        let norm2: f64 = basis.iter().map(|b| b * b).sum();
        for (ui, bi) in u.iter_mut().zip(basis.iter()) {
            *ui -= dot / norm2 * bi;
        }
    }
    let norm = u.iter().map(|x| x * x).sum::<f64>().sqrt();
    let target = (d as f64 / 2.0).sqrt();
    u.iter_mut().for_each(|x| *x *= target / norm);
    u
}

fn cue_basis(d: usize) -> (Vec<f64>, Vec<f64>) {
    let w = 2.0 * std::f64::consts::PI * CUE_HARMONIC as f64 / d as f64;
    (
        (0..d).map(|f| (w * f as f64).sin()).collect(),
        (0..d).map(|f| (w * f as f64).cos()).collect(),
    )
}

/// Smooth random mixture plus the cue harmonic at `cue_amp`.
fn base_sequence(seq_len: usize, d: usize, cue_amp: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let mut x = Tensor::zeros(vec![seq_len, d]);
    let two_pi = 2.0 * std::f64::consts::PI;

    let add_component = |x: &mut Tensor, harmonic: usize, amp: f64, rng: &mut ChaCha8Rng| {
        let phase = rng.random_range(0.0..two_pi);
        let env_cycles = rng.random_range(1..=3) as f64;
        let env_phase = rng.random_range(0.0..two_pi);
        let w = two_pi * harmonic as f64 / d as f64;
        for t in 0..seq_len {
            let env = 1.0 + 0.3 * (two_pi * env_cycles * t as f64 / seq_len as f64 + env_phase).sin();
            for f in 0..d {
                let v = x.at(t, f) + amp * env * (w * f as f64 + phase).sin();
                x.set(t, f, v);
            }
        }
    };

    for _ in 0..3 {
        let harmonic = BASE_HARMONICS[rng.random_range(0..BASE_HARMONICS.len())];
        let amp = rng.random_range(0.4..0.9);
        add_component(&mut x, harmonic, amp, rng);
    }
    add_component(&mut x, CUE_HARMONIC, cue_amp, rng);
    x
}

fn apply_artifact(x: &mut Tensor, artifact: &Artifact, rng: &mut ChaCha8Rng) {
    let (seq_len, d) = (x.rows(), x.cols());
    let two_pi = 2.0 * std::f64::consts::PI;
    match artifact.kind {
        ArtifactKind::Harmonic { cycles, amp } => {
            let sig = artifact_signature(artifact.id, d);
            let phase = rng.random_range(0.0..two_pi);
            for t in 0..seq_len {
                let osc = (two_pi * cycles * t as f64 / seq_len as f64 + phase).sin();
                for f in 0..d {
                    let v = x.at(t, f) + amp * osc * sig[f];
                    x.set(t, f, v);
                }
            }
        }
        ArtifactKind::ArNoise { coef, amp } => {
            let norm = amp * (1.0 - coef * coef).max(1e-12).sqrt();
            for f in 0..d {
                let mut z = 0.0;
                for t in 0..seq_len {
                    let eps: f64 = rng.sample(StandardNormal);
                    z = coef * z + eps;
                    let v = x.at(t, f) + norm * z;
                    x.set(t, f, v);
                }
            }
        }
    }
}

fn add_noise(x: &mut Tensor, scale: f64, rng: &mut ChaCha8Rng) {
    if scale == 0.0 {
        return;
    }
    for v in x.data_mut() {
        let eps: f64 = rng.sample(StandardNormal);
        *v += scale * eps;
    }
}

fn generate_example(
    spec: &DomainSpec,
    seq_len: usize,
    d: usize,
    label: Label,
    rng: &mut ChaCha8Rng,
) -> Tensor {
    let cue_amp = rng.random_range(0.7..1.0);
    let cue_amp = match label {
        Label::Bonafide => cue_amp,
        Label::Spoof => cue_amp * (-spec.shared_cue_strength).exp(),
    };
    let mut x = base_sequence(seq_len, d, cue_amp, rng);
    if label == Label::Spoof {
        apply_artifact(&mut x, &spec.spoof_artifact, rng);
    }
    add_noise(&mut x, spec.noise_scale, rng);
    x
}

fn validate_spec(spec: &CorpusSpec) -> Result<(), DataError> {
    if spec.seq_len == 0 || spec.d_model == 0 {
        return Err(DataError::Validation("seq_len and d_model must be >= 1".into()));
    }
    if spec.train.len() < 2 {
        return Err(DataError::Validation(format!(
            "need at least 2 training domains, got {}",
            spec.train.len()
        )));
    }
    if !(0.0..1.0).contains(&spec.dev_fraction) {
        return Err(DataError::Validation("dev_fraction must be in [0, 1)".into()));
    }
    for d in spec.train.iter().chain(spec.held_out.iter()) {
        if d.n_spoof == 0 || d.n_bonafide == 0 {
            return Err(DataError::Validation(format!(
                "domain {} must have n_spoof and n_bonafide >= 1",
                d.domain_id
            )));
        }
        if d.shared_cue_strength < 0.0 {
            return Err(DataError::Validation(format!(
                "domain {}: shared_cue_strength must be >= 0",
                d.domain_id
            )));
        }
    }
    let train_ids: HashSet<u32> = spec.train.iter().map(|d| d.spoof_artifact.id).collect();
    for d in &spec.held_out {
        if train_ids.contains(&d.spoof_artifact.id) {
            return Err(DataError::OverlappingArtifact {
                id: d.spoof_artifact.id,
            });
        }
    }
    let mut domain_ids = HashSet::new();
    for d in spec.train.iter().chain(spec.held_out.iter()) {
        if !domain_ids.insert(d.domain_id) {
            return Err(DataError::Validation(format!(
                "duplicate domain_id {}",
                d.domain_id
            )));
        }
    }
    Ok(())
}

/// One split's worth of domains. Bonafide examples are drawn from a
/// single pool and dealt round-robin across the domains, so the
/// per-domain bonafide pools are disjoint by construction.
fn generate_set(
    specs: &[DomainSpec],
    seq_len: usize,
    d: usize,
    split: Split,
    count_of: impl Fn(&DomainSpec) -> (usize, usize),
    rng: &mut ChaCha8Rng,
) -> Result<DomainSet, DataError> {
    let mut set = DomainSet::default();
    for spec in specs {
        let (n_spoof, _) = count_of(spec);
        let domain = set.domain_mut(spec.domain_id);
        for i in 0..n_spoof {
            let features = generate_example(spec, seq_len, d, Label::Spoof, rng);
            domain.examples.push(Example::in_memory(
                format!("{}-d{}-spoof-{i:04}", split.as_str(), spec.domain_id),
                Label::Spoof,
                spec.domain_id,
                features,
            ));
        }
    }

    // Round-robin deal of the bonafide pool, skipping filled domains.
    let mut remaining: Vec<(usize, usize)> = specs
        .iter()
        .enumerate()
        .map(|(i, s)| (i, count_of(s).1))
        .collect();
    let mut global_idx = 0usize;
    while remaining.iter().any(|&(_, n)| n > 0) {
        for slot in remaining.iter_mut() {
            if slot.1 == 0 {
                continue;
            }
            let spec = &specs[slot.0];
            let features = generate_example(spec, seq_len, d, Label::Bonafide, rng);
            set.domain_mut(spec.domain_id).examples.push(Example::in_memory(
                format!("{}-d{}-bona-{global_idx:04}", split.as_str(), spec.domain_id),
                Label::Bonafide,
                spec.domain_id,
                features,
            ));
            slot.1 -= 1;
            global_idx += 1;
        }
    }
    Ok(set)
}

/// Generate the full corpus for (spec, seed): per-domain train pools, a
/// dev pool from the same training domains, and an eval pool from the
/// held-out domains only.
pub fn generate_corpus(spec: &CorpusSpec, seed: u64) -> Result<Corpus, DataError> {
    validate_spec(spec)?;
    let dev_count = |s: &DomainSpec| {
        (
            ((s.n_spoof as f64 * spec.dev_fraction).ceil() as usize).max(1),
            ((s.n_bonafide as f64 * spec.dev_fraction).ceil() as usize).max(1),
        )
    };
    let full_count = |s: &DomainSpec| (s.n_spoof, s.n_bonafide);

    let mut train_rng = substream(seed, "data.train");
    let mut dev_rng = substream(seed, "data.dev");
    let mut eval_rng = substream(seed, "data.eval");

    Ok(Corpus {
        train: generate_set(&spec.train, spec.seq_len, spec.d_model, Split::Train, full_count, &mut train_rng)?,
        dev: generate_set(&spec.train, spec.seq_len, spec.d_model, Split::Dev, dev_count, &mut dev_rng)?,
        eval: generate_set(&spec.held_out, spec.seq_len, spec.d_model, Split::Eval, full_count, &mut eval_rng)?,
    })
}

// ---------------------------------------------------------------------
// Feature files and manifests
// ---------------------------------------------------------------------

/// Binary layout: magic `MDGF`, u8 ndim, ndim little-endian u32 dims,
/// then the row-major f64 payload, little-endian.
pub fn write_feature_file(path: &Path, t: &Tensor) -> Result<(), DataError> {
    let mut buf = Vec::with_capacity(5 + t.shape().len() * 4 + t.numel() * 8);
    buf.extend_from_slice(FEATURE_MAGIC);
    buf.push(t.shape().len() as u8);
    for &d in t.shape() {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn read_feature_file(path: &Path) -> Result<Tensor, DataError> {
    let err = |message: String| DataError::FeatureFile {
        path: path.to_path_buf(),
        message,
    };
    let mut file = std::fs::File::open(path)?;
    let mut bytes = Vec::new();
    file.read_to_end(&mut bytes)?;
    if bytes.len() < 5 || &bytes[0..4] != FEATURE_MAGIC {
        return Err(err("bad magic".into()));
    }
    let ndim = bytes[4] as usize;
    let mut off = 5;
    let mut shape = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        if off + 4 > bytes.len() {
            return Err(err("truncated shape header".into()));
        }
        shape.push(u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as usize);
        off += 4;
    }
    let numel: usize = shape.iter().product();
    if bytes.len() != off + numel * 8 {
        return Err(err(format!(
            "payload length {} does not match shape {shape:?}",
            bytes.len() - off
        )));
    }
    let data = bytes[off..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(Tensor::new(shape, data))
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestRow {
    example_id: String,
    path: String,
    label: String,
    domain_id: u32,
    split: String,
}

/// Write a corpus to `dir` as `manifest.csv` plus one feature file per
/// example under `features/`. Returns the manifest path.
pub fn write_corpus(corpus: &Corpus, dir: &Path) -> Result<PathBuf, DataError> {
    let feat_dir = dir.join("features");
    std::fs::create_dir_all(&feat_dir)?;
    let manifest_path = dir.join("manifest.csv");
    let mut w = csv::Writer::from_path(&manifest_path).map_err(|e| DataError::Io(e.to_string()))?;
    for (split, set) in [
        (Split::Train, &corpus.train),
        (Split::Dev, &corpus.dev),
        (Split::Eval, &corpus.eval),
    ] {
        for domain in &set.domains {
            for ex in &domain.examples {
                let rel = format!("features/{}.bin", ex.example_id);
                write_feature_file(&dir.join(&rel), ex.features()?)?;
                w.serialize(ManifestRow {
                    example_id: ex.example_id.clone(),
                    path: rel,
                    label: ex.label.as_int().to_string(),
                    domain_id: ex.domain_id,
                    split: split.as_str().to_string(),
                })
                .map_err(|e| DataError::Io(e.to_string()))?;
            }
        }
    }
    w.flush()?;
    Ok(manifest_path)
}

/// Load a manifest into per-split domain sets. Feature payloads load
/// lazily on first access; file existence is checked here so missing
/// files fail fast with their row number.
pub fn load_manifest(manifest_path: &Path) -> Result<Corpus, DataError> {
    let dir = manifest_path.parent().unwrap_or_else(|| Path::new("."));
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(manifest_path)
        .map_err(|e| DataError::Io(e.to_string()))?;

    let mut corpus = Corpus::default();
    let mut seen = HashSet::new();
    // Row 1 is the header; data rows start at 2.
    for (idx, row) in reader.deserialize::<ManifestRow>().enumerate() {
        let rownum = idx + 2;
        let row = row.map_err(|e| DataError::BadRow {
            row: rownum,
            message: e.to_string(),
        })?;
        if !seen.insert(row.example_id.clone()) {
            return Err(DataError::DuplicateExampleId {
                row: rownum,
                id: row.example_id,
            });
        }
        let label = Label::from_str_int(&row.label).map_err(|_| DataError::UnknownLabel {
            row: rownum,
            value: row.label.clone(),
        })?;
        let split = Split::from_str(&row.split).map_err(|_| DataError::UnknownSplit {
            row: rownum,
            value: row.split.clone(),
        })?;
        let path = dir.join(&row.path);
        if !path.is_file() {
            return Err(DataError::MissingFeatureFile { row: rownum, path });
        }
        let set = match split {
            Split::Train => &mut corpus.train,
            Split::Dev => &mut corpus.dev,
            Split::Eval => &mut corpus.eval,
        };
        set.domain_mut(row.domain_id).examples.push(Example {
            example_id: row.example_id,
            label,
            domain_id: row.domain_id,
            source: FeatureSource::File {
                path,
                cell: OnceCell::new(),
            },
        });
    }
    Ok(corpus)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::{eer, ScoreSet};

    /// Test-only oracle: energy at the cue bin of the channel spectrum,
    /// both quadratures, averaged over frames. Computed straight from the
    /// tensor, independent of the generator internals.
    fn cue_statistic(x: &Tensor) -> f64 {
        let (seq_len, d) = (x.rows(), x.cols());
        let (sin_b, cos_b) = cue_basis(d);
        let mut total = 0.0;
        for t in 0..seq_len {
            let mut s = 0.0;
            let mut c = 0.0;
            for f in 0..d {
                s += x.at(t, f) * sin_b[f];
                c += x.at(t, f) * cos_b[f];
            }
            total += s * s + c * c;
        }
        total / seq_len as f64
    }

    fn tiny_spec(cue_strength: f64, noise: f64) -> CorpusSpec {
        let mk = |domain_id, artifact_id, cycles| DomainSpec {
            domain_id,
            spoof_artifact: Artifact {
                id: artifact_id,
                kind: ArtifactKind::Harmonic { cycles, amp: 1.2 },
            },
            shared_cue_strength: cue_strength,
            n_spoof: 30,
            n_bonafide: 30,
            noise_scale: noise,
        };
        CorpusSpec {
            seq_len: 16,
            d_model: 16,
            dev_fraction: 0.2,
            train: vec![mk(1, 1, 2.0), mk(2, 2, 3.0), mk(3, 3, 4.0)],
            held_out: vec![mk(101, 7, 6.0), mk(102, 8, 8.0)],
        }
    }

    fn eval_cue_eer(corpus: &Corpus) -> f64 {
        let mut scores = ScoreSet::new();
        for ex in corpus.eval.all_examples() {
            // Higher cue energy means more bonafide.
            scores.push(ex.example_id.clone(), cue_statistic(ex.features().unwrap()), ex.label);
        }
        eer(&scores).unwrap().eer
    }

    #[test]
    fn default_benchmark_structure() {
        let corpus = generate_corpus(&CorpusSpec::default_benchmark(), 7).unwrap();
        assert_eq!(corpus.train.domains.len(), 6);
        assert_eq!(corpus.eval.domains.len(), 2);
        assert_eq!(corpus.dev.domains.len(), 6);
        for d in &corpus.train.domains {
            let spoof = d.examples.iter().filter(|e| e.label == Label::Spoof).count();
            let bona = d.examples.len() - spoof;
            assert_eq!((spoof, bona), (40, 40));
        }
    }

    #[test]
    fn generation_is_pure_in_spec_and_seed() {
        let spec = tiny_spec(1.0, 0.3);
        let a = generate_corpus(&spec, 5).unwrap();
        let b = generate_corpus(&spec, 5).unwrap();
        assert!(a.train.value_eq(&b.train).unwrap());
        assert!(a.eval.value_eq(&b.eval).unwrap());
        let c = generate_corpus(&spec, 6).unwrap();
        assert!(!a.train.value_eq(&c.train).unwrap());
    }

    #[test]
    fn zero_cue_strength_leaves_no_transferable_signal() {
        // With the notch disabled, the cue detector is at chance on
        // held-out data.
        let corpus = generate_corpus(&tiny_spec(0.0, 0.3), 11).unwrap();
        let e = eval_cue_eer(&corpus);
        assert!((e - 0.5).abs() < 0.12, "cue-oracle EER {e} should be near chance");
    }

    #[test]
    fn strong_cue_without_noise_is_perfectly_detectable() {
        let corpus = generate_corpus(&tiny_spec(4.0, 0.0), 11).unwrap();
        let e = eval_cue_eer(&corpus);
        assert_eq!(e, 0.0, "cue-oracle EER should be exactly 0");
    }

    #[test]
    fn overlapping_artifact_ids_rejected() {
        let mut spec = tiny_spec(1.0, 0.3);
        spec.held_out[0].spoof_artifact.id = spec.train[0].spoof_artifact.id;
        assert_eq!(
            generate_corpus(&spec, 1).unwrap_err(),
            DataError::OverlappingArtifact { id: 1 }
        );
    }

    #[test]
    fn bonafide_pools_are_disjoint_across_domains() {
        let corpus = generate_corpus(&tiny_spec(1.0, 0.3), 3).unwrap();
        let mut ids = HashSet::new();
        for d in &corpus.train.domains {
            for e in d.examples.iter().filter(|e| e.label == Label::Bonafide) {
                assert!(ids.insert(e.example_id.clone()), "bonafide {} reused", e.example_id);
            }
        }
    }

    #[test]
    fn feature_file_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.bin");
        let mut rng = substream(2, "test.feat");
        let t = Tensor::randn(vec![5, 3], 1.3, &mut rng);
        write_feature_file(&path, &t).unwrap();
        let back = read_feature_file(&path).unwrap();
        assert_eq!(t.shape(), back.shape());
        for (a, b) in t.data().iter().zip(back.data().iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn corpus_round_trips_through_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = generate_corpus(&tiny_spec(1.0, 0.2), 9).unwrap();
        let manifest = write_corpus(&corpus, dir.path()).unwrap();
        let loaded = load_manifest(&manifest).unwrap();
        assert!(corpus.train.value_eq(&loaded.train).unwrap());
        assert!(corpus.dev.value_eq(&loaded.dev).unwrap());
        assert!(corpus.eval.value_eq(&loaded.eval).unwrap());
    }

    #[test]
    fn manifest_errors_name_the_row() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = generate_corpus(&tiny_spec(1.0, 0.2), 9).unwrap();
        let manifest = write_corpus(&corpus, dir.path()).unwrap();
        let text = std::fs::read_to_string(&manifest).unwrap();

        // Unknown label on data row 3.
        let mut lines: Vec<String> = text.lines().map(String::from).collect();
        lines[2] = lines[2].replacen(",1,", ",2,", 1).replacen(",0,", ",2,", 1);
        let bad = dir.path().join("bad_label.csv");
        std::fs::write(&bad, lines.join("\n")).unwrap();
        match load_manifest(&bad).unwrap_err() {
            DataError::UnknownLabel { row, value } => {
                assert_eq!(row, 3);
                assert_eq!(value, "2");
            }
            other => panic!("unexpected error {other:?}"),
        }

        // Duplicate id.
        let mut lines: Vec<String> = text.lines().map(String::from).collect();
        lines[3] = lines[2].clone();
        let dup = dir.path().join("dup.csv");
        std::fs::write(&dup, lines.join("\n")).unwrap();
        assert!(matches!(
            load_manifest(&dup).unwrap_err(),
            DataError::DuplicateExampleId { row: 4, .. }
        ));

        // Missing feature file.
        let mut lines: Vec<String> = text.lines().map(String::from).collect();
        lines[1] = lines[1].replace("features/", "features/missing-");
        let missing = dir.path().join("missing.csv");
        std::fs::write(&missing, lines.join("\n")).unwrap();
        assert!(matches!(
            load_manifest(&missing).unwrap_err(),
            DataError::MissingFeatureFile { row: 2, .. }
        ));
    }
}
