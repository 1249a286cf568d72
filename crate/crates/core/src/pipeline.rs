//! File-based experiment stages: synth, prepare, train, predict, evaluate and
//! report.
//!
//! Each stage writes a `manifest.json` holding the resolved configuration and
//! content digests of its inputs and outputs. Manifests carry no timestamps
//! or absolute paths, so a rerun with the same inputs reproduces them byte
//! for byte.

use crate::align::{align_trial, AlignmentMode};
use crate::encode::{
    build_target, encode_image, fit_output_pca, EncodeConfig, EncodeError, EncodedSample, OutputPcaModel, CHANNEL_NAMES,
    N_CHANNELS,
};
use crate::eval::{self, EvalReport, ExperimentMeta, TrialWaveforms};
use crate::gait::{
    classify_movement, detect_stance_events, detect_stance_limb, mirror_force_frame, mirror_left_to_right, ClassifyParams,
    ContactParams, StanceWindow,
};
use crate::hash::{dir_sha256_hex, file_sha256_hex, sha256_hex, Sha256Writer};
use crate::ingest::{content_hash, parse_trial, quality_gate, resample_uniform, GateConfig, IngestError};
use crate::model::{self, Activation, ModelError, NetworkSpec, Pooling, TrainConfig, WeightBundle};
use crate::simulate::{generate_corpus, read_corpus_index, virtual_imu_trial, CorpusRow, SimError, SynthSpec, VirtualImuConfig, CORPUS_INDEX};
use crate::trial::*;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use thiserror::Error;

pub const ENV_DATA_ROOT: &str = "ACCEL2GRF_DATA_ROOT";
pub const MANIFEST: &str = "manifest.json";
pub const RESOLVED_CONFIG: &str = "config.resolved.json";

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config error at `{path}`: {message}")]
    Config { path: String, message: String },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("experiment {0}: requested subset is empty")]
    EmptySubset(String),
    #[error("checksum mismatch for {what}: expected {expected}, found {actual}")]
    Checksum { what: String, expected: String, actual: String },
    #[error("{0}")]
    Data(String),
}

impl PipelineError {
    /// Process exit status for the command line.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Data(_) => 1,
            PipelineError::Config { .. } => 2,
            PipelineError::Io { .. } => 3,
            PipelineError::EmptySubset(_) => 4,
            PipelineError::Checksum { .. } => 5,
        }
    }

    fn config(path: impl Into<String>, message: impl ToString) -> Self {
        PipelineError::Config { path: path.into(), message: message.to_string() }
    }
}

type Result<T, E = PipelineError> = std::result::Result<T, E>;

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io { path: path.to_path_buf(), source }
}

impl From<EncodeError> for PipelineError {
    fn from(e: EncodeError) -> Self {
        match e {
            EncodeError::ChecksumMismatch { path, expected, actual } => {
                PipelineError::Checksum { what: path.display().to_string(), expected, actual }
            }
            EncodeError::Io { path, source } => PipelineError::Io { path, source },
            other => PipelineError::Data(other.to_string()),
        }
    }
}

impl From<ModelError> for PipelineError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::ChecksumMismatch { expected, actual } => PipelineError::Checksum { what: "model".into(), expected, actual },
            ModelError::Io { path, source } => PipelineError::Io { path, source },
            other => PipelineError::Data(other.to_string()),
        }
    }
}

impl From<IngestError> for PipelineError {
    fn from(e: IngestError) -> Self {
        match e {
            IngestError::Io { path, source } => PipelineError::Io { path, source },
            other => PipelineError::Data(other.to_string()),
        }
    }
}

impl From<SimError> for PipelineError {
    fn from(e: SimError) -> Self {
        match e {
            SimError::Io { path, source } => PipelineError::Io { path, source },
            SimError::Ingest(inner) => inner.into(),
            other => PipelineError::Data(other.to_string()),
        }
    }
}

impl From<eval::EmitError> for PipelineError {
    fn from(e: eval::EmitError) -> Self {
        PipelineError::Io { path: e.path, source: e.source }
    }
}

// ---------------------------------------------------------------------------
// Configuration

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Corpus root; falls back to `ACCEL2GRF_DATA_ROOT`.
    pub corpus: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub specs: Vec<SynthSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QualityConfig {
    pub max_gap_frames: usize,
    pub min_duration_s: f64,
}

impl Default for QualityConfig {
    fn default() -> Self {
        let g = GateConfig::default();
        QualityConfig { max_gap_frames: g.max_gap_frames, min_duration_s: g.min_duration_s }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GaitConfig {
    pub contact: ContactParams,
    pub classify: ClassifyParams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PcaConfig {
    pub variance_keep: f64,
    pub k_cap: usize,
}

impl Default for PcaConfig {
    fn default() -> Self {
        PcaConfig { variance_keep: 0.995, k_cap: 64 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitMode {
    /// Seeded hash of the trial id against `test_fraction`.
    #[default]
    Hash,
    /// Marker-derived trials train, worn-sensor trials test.
    SourceKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub mode: SplitMode,
    pub test_fraction: f64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig { mode: SplitMode::Hash, test_fraction: 0.2 }
    }
}

/// Movement part of an experiment subset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum MovementFilter {
    All,
    /// Any running class.
    Run,
    Class(MovementClass),
}

impl MovementFilter {
    pub fn matches(self, class: MovementClass) -> bool {
        match self {
            MovementFilter::All => true,
            MovementFilter::Run => class.is_run(),
            MovementFilter::Class(c) => c == class,
        }
    }
}

impl TryFrom<String> for MovementFilter {
    type Error = String;

    fn try_from(s: String) -> Result<Self, String> {
        match s.as_str() {
            "all" => Ok(MovementFilter::All),
            "run" => Ok(MovementFilter::Run),
            other => serde_json::from_value(serde_json::Value::String(other.into()))
                .map(MovementFilter::Class)
                .map_err(|_| format!("unknown movement {other:?}; expected all, run or a movement class")),
        }
    }
}

impl From<MovementFilter> for String {
    fn from(m: MovementFilter) -> String {
        match m {
            MovementFilter::All => "all".into(),
            MovementFilter::Run => "run".into(),
            MovementFilter::Class(c) => c.as_str().into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LimbSubset {
    Left,
    Right,
    /// Both limbs, left-stance trials mirrored onto the right.
    #[default]
    Combined,
}

impl LimbSubset {
    pub fn as_str(self) -> &'static str {
        match self {
            LimbSubset::Left => "left",
            LimbSubset::Right => "right",
            LimbSubset::Combined => "combined",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub id: String,
    pub movement: MovementFilter,
    #[serde(default)]
    pub stance_limb: LimbSubset,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    pub conv_widths: [usize; 2],
    pub dense_width: usize,
    pub activation: Activation,
    pub pooling: Pooling,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        let s = NetworkSpec::default();
        NetworkConfig { conv_widths: s.conv_widths, dense_width: s.dense_width, activation: s.activation, pooling: s.pooling }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CascadeConfig {
    /// Directory holding a parent `model.json`/`model.bin` to warm-start from.
    pub parent: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub svg: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub experiment_id: String,
    /// Run seed: drives the hash split and training (overrides `train.seed`).
    pub seed: u64,
    pub data: DataConfig,
    pub synth: SynthConfig,
    pub quality: QualityConfig,
    pub gait: GaitConfig,
    pub virtual_imu: VirtualImuConfig,
    pub alignment: AlignmentMode,
    pub encode: EncodeConfig,
    pub pca: PcaConfig,
    pub split: SplitConfig,
    pub experiments: Vec<ExperimentConfig>,
    pub network: NetworkConfig,
    pub train: TrainConfig,
    pub cascade: CascadeConfig,
    pub eval: EvalConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            experiment_id: "exp".into(),
            seed: 0,
            data: DataConfig::default(),
            synth: SynthConfig::default(),
            quality: QualityConfig::default(),
            gait: GaitConfig::default(),
            virtual_imu: VirtualImuConfig::default(),
            alignment: AlignmentMode::Pca,
            encode: EncodeConfig { size: NetworkSpec::default().input_size, ..EncodeConfig::default() },
            pca: PcaConfig::default(),
            split: SplitConfig::default(),
            experiments: vec![ExperimentConfig { id: "all".into(), movement: MovementFilter::All, stance_limb: LimbSubset::Combined }],
            network: NetworkConfig::default(),
            train: TrainConfig::default(),
            cascade: CascadeConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl PipelineConfig {
    /// Parses JSON, reporting the key path of the first offending entry.
    pub fn from_json(text: &str) -> Result<PipelineConfig> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: PipelineConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            PipelineError::config(if path.is_empty() { ".".into() } else { path }, e.into_inner())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<PipelineConfig> {
        let text = fs::read_to_string(path).map_err(io(path))?;
        PipelineConfig::from_json(&text)
    }

    /// Copies the run seed into the training config.
    pub fn resolved(&self) -> PipelineConfig {
        let mut out = self.clone();
        out.train.seed = self.seed;
        out
    }

    pub fn validate(&self) -> Result<()> {
        for (i, s) in self.synth.specs.iter().enumerate() {
            s.validate().map_err(|e| PipelineError::config(format!("synth.specs[{i}]"), e))?;
        }
        if self.quality.min_duration_s < 0.0 {
            return Err(PipelineError::config("quality.min_duration_s", "must be non-negative"));
        }
        if !(self.gait.contact.threshold_n > 0.0) {
            return Err(PipelineError::config("gait.contact.threshold_n", "must be positive"));
        }
        if !(self.virtual_imu.output_hz > 0.0) {
            return Err(PipelineError::config("virtual_imu.output_hz", "must be positive"));
        }
        if self.encode.size < 10 {
            return Err(PipelineError::config("encode.size", "must be at least 10"));
        }
        if self.encode.n_points < 2 {
            return Err(PipelineError::config("encode.n_points", "must be at least 2"));
        }
        if let Some(r) = self.encode.fixed_range_mps2 {
            if !(r > 0.0) {
                return Err(PipelineError::config("encode.fixed_range_mps2", "must be positive"));
            }
        }
        if !(self.pca.variance_keep > 0.0 && self.pca.variance_keep <= 1.0) {
            return Err(PipelineError::config("pca.variance_keep", "must lie in (0, 1]"));
        }
        if self.pca.k_cap == 0 {
            return Err(PipelineError::config("pca.k_cap", "must be positive"));
        }
        if !(self.split.test_fraction >= 0.0 && self.split.test_fraction < 1.0) {
            return Err(PipelineError::config("split.test_fraction", "must lie in [0, 1)"));
        }
        if self.experiments.is_empty() {
            return Err(PipelineError::config("experiments", "at least one experiment is required"));
        }
        let mut ids = HashSet::new();
        for (i, e) in self.experiments.iter().enumerate() {
            let ok = !e.id.is_empty() && e.id.chars().all(|c| c.is_ascii_alphanumeric() || "-_.".contains(c));
            if !ok {
                return Err(PipelineError::config(format!("experiments[{i}].id"), "use letters, digits, '-', '_' or '.'"));
            }
            if !ids.insert(&e.id) {
                return Err(PipelineError::config(format!("experiments[{i}].id"), format!("duplicate id {:?}", e.id)));
            }
        }
        let spec = self.network_spec(1);
        spec.validate().map_err(|e| PipelineError::config("network", e))?;
        self.train.validate().map_err(|e| PipelineError::config("train", e))?;
        Ok(())
    }

    pub fn network_spec(&self, k_outputs: usize) -> NetworkSpec {
        NetworkSpec {
            input_size: self.encode.size,
            conv_widths: self.network.conv_widths,
            dense_width: self.network.dense_width,
            k_outputs,
            activation: self.network.activation,
            pooling: self.network.pooling,
        }
    }

    /// Explicit corpus path, else the environment default.
    pub fn corpus_root(&self, explicit: Option<&Path>) -> Result<PathBuf> {
        explicit
            .map(Path::to_path_buf)
            .or_else(|| self.data.corpus.clone())
            .or_else(|| std::env::var_os(ENV_DATA_ROOT).map(PathBuf::from))
            .ok_or_else(|| PipelineError::config("data.corpus", format!("no corpus given and {ENV_DATA_ROOT} is unset")))
    }
}

// ---------------------------------------------------------------------------
// Provenance

#[derive(Debug, Serialize, Deserialize)]
pub struct StageManifest {
    pub stage: String,
    pub version: String,
    pub config: PipelineConfig,
    /// Input label to content digest.
    pub inputs: BTreeMap<String, String>,
    /// Output file (relative to the stage directory) to content digest.
    pub outputs: BTreeMap<String, String>,
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(io(parent))?;
    }
    fs::write(path, text).map_err(io(path))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_text(path, &(serde_json::to_string_pretty(value).expect("serializable") + "\n"))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(io(path))?;
    serde_json::from_str(&text).map_err(|e| PipelineError::Data(format!("{}: {e}", path.display())))
}

fn relative_files(dir: &Path) -> Result<Vec<String>> {
    fn walk(root: &Path, dir: &Path, out: &mut Vec<String>) -> std::io::Result<()> {
        for entry in fs::read_dir(dir)? {
            let p = entry?.path();
            if p.is_dir() {
                walk(root, &p, out)?;
            } else {
                let rel = p.strip_prefix(root).expect("below root");
                out.push(rel.components().map(|c| c.as_os_str().to_string_lossy()).collect::<Vec<_>>().join("/"));
            }
        }
        Ok(())
    }
    let mut out = Vec::new();
    walk(dir, dir, &mut out).map_err(io(dir))?;
    out.sort();
    Ok(out)
}

/// Writes the resolved config and a manifest covering every file in `dir`.
fn finish_stage(stage: &str, cfg: &PipelineConfig, dir: &Path, inputs: BTreeMap<String, String>) -> Result<()> {
    write_json(&dir.join(RESOLVED_CONFIG), cfg)?;
    let mut outputs = BTreeMap::new();
    for rel in relative_files(dir)? {
        if rel == MANIFEST {
            continue;
        }
        let path = dir.join(&rel);
        outputs.insert(rel, file_sha256_hex(&path).map_err(io(&path))?);
    }
    let manifest = StageManifest { stage: stage.into(), version: env!("CARGO_PKG_VERSION").into(), config: cfg.clone(), inputs, outputs };
    write_json(&dir.join(MANIFEST), &manifest)
}

fn digest_dir(dir: &Path) -> Result<String> {
    dir_sha256_hex(dir).map_err(io(dir))
}

/// Digest of a previous stage: its manifest when present, else its whole tree.
fn stage_digest(dir: &Path) -> Result<String> {
    let manifest = dir.join(MANIFEST);
    if manifest.is_file() {
        file_sha256_hex(&manifest).map_err(io(&manifest))
    } else {
        digest_dir(dir)
    }
}

// ---------------------------------------------------------------------------
// synth

/// Generates the configured synthetic corpus into `out`.
pub fn synth(cfg: &PipelineConfig, out: &Path) -> Result<Vec<CorpusRow>> {
    if cfg.synth.specs.is_empty() {
        return Err(PipelineError::config("synth.specs", "no synthetic specs configured"));
    }
    let cfg = cfg.resolved();
    let rows = generate_corpus(&cfg.synth.specs, out).map_err(|e| match e {
        SimError::DuplicateTrialId(id) => PipelineError::config("synth.specs", format!("duplicate trial id {id}")),
        other => other.into(),
    })?;
    finish_stage("synth", &cfg, out, BTreeMap::new())?;
    Ok(rows)
}

// ---------------------------------------------------------------------------
// prepare

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// `sha256(seed ‖ trial_id)` read as a fraction in `[0, 1)`.
pub fn hash_unit(seed: u64, trial_id: &str) -> f64 {
    let mut h = Sha256Writer::new();
    h.update(&seed.to_le_bytes());
    h.update(trial_id.as_bytes());
    let d = h.finish();
    let v = u64::from_be_bytes(d[..8].try_into().expect("8 bytes"));
    (v >> 11) as f64 / (1u64 << 53) as f64
}

pub fn assign_split(split: &SplitConfig, seed: u64, trial_id: &str, source: SourceKind) -> Split {
    match split.mode {
        SplitMode::Hash if hash_unit(seed, trial_id) < split.test_fraction => Split::Test,
        SplitMode::Hash => Split::Train,
        SplitMode::SourceKind => match source {
            SourceKind::Markers => Split::Train,
            SourceKind::Accelerometers => Split::Test,
        },
    }
}

/// One accepted trial reduced to what the experiments need.
#[derive(Debug, Clone)]
struct PreparedTrial {
    trial: TrialRecord,
    window: StanceWindow,
    movement: MovementClass,
    limb: Limb,
    split: Split,
    /// Normalized, interlaced force/moment target in the lab frame.
    target: Vec<f64>,
    hash: [u8; 32],
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Rejection {
    pub trial_id: String,
    pub reason: String,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SplitManifest {
    pub mode: SplitMode,
    pub seed: u64,
    pub test_fraction: f64,
    pub train: Vec<String>,
    pub test: Vec<String>,
    pub rejected: Vec<Rejection>,
    pub duplicates: Vec<String>,
}

/// Per-experiment record written next to the encoded samples.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ExperimentManifest {
    pub meta: ExperimentMeta,
    pub train: Vec<String>,
    pub test: Vec<String>,
    pub pca_checksum: String,
    pub k: usize,
    pub input_size: usize,
    pub n_points: usize,
}

pub const SPLIT_JSON: &str = "split.json";
pub const EXPERIMENT_JSON: &str = "experiment.json";
pub const META_JSON: &str = "meta.json";

fn list_trial_dirs(corpus: &Path) -> Result<Vec<(String, PathBuf)>> {
    let index = corpus.join(CORPUS_INDEX);
    if index.is_file() {
        let rows = read_corpus_index(&index)?;
        return Ok(rows.into_iter().map(|r| (r.trial_id, corpus.join(r.path))).collect());
    }
    let mut out = Vec::new();
    for entry in fs::read_dir(corpus).map_err(io(corpus))? {
        let p = entry.map_err(io(corpus))?.path();
        if p.join(crate::ingest::MANIFEST_FILE).is_file() {
            out.push((p.file_name().expect("dir name").to_string_lossy().into_owned(), p));
        }
    }
    out.sort();
    Ok(out)
}

fn reject(id: &str, reason: impl ToString) -> std::result::Result<PreparedTrial, Rejection> {
    Err(Rejection { trial_id: id.into(), reason: reason.to_string() })
}

fn prepare_trial(cfg: &PipelineConfig, id: &str, dir: &Path) -> Result<std::result::Result<PreparedTrial, Rejection>> {
    let raw = parse_trial(dir)?;
    let hash = content_hash(&raw);
    let gate = GateConfig {
        max_gap_frames: cfg.quality.max_gap_frames,
        min_duration_s: cfg.quality.min_duration_s,
        contact: cfg.gait.contact.clone(),
    };
    let trial = match quality_gate(&raw, &gate) {
        Ok(t) => t,
        Err(reason) => return Ok(reject(id, reason)),
    };
    let Some(force) = trial.force.as_ref() else {
        return Ok(reject(id, "no force track"));
    };
    let window = match detect_stance_events(force, &cfg.gait.contact) {
        Ok(w) => w,
        Err(e) => return Ok(reject(id, e)),
    };
    let movement = match classify_movement(&trial, Some(&window), &cfg.gait.classify) {
        Ok(label) => label.class,
        Err(e) => return Ok(reject(id, e)),
    };
    let accel = match trial.source_kind {
        SourceKind::Markers => match virtual_imu_trial(&trial, &cfg.virtual_imu) {
            Ok(t) => t,
            Err(e) => return Ok(reject(id, e)),
        },
        SourceKind::Accelerometers => {
            let mut t = trial.clone();
            for s in &mut t.sensors {
                if (s.rate_hz - cfg.virtual_imu.output_hz).abs() > 1e-9 {
                    *s = match resample_uniform(s, cfg.virtual_imu.output_hz) {
                        Ok(r) => r,
                        Err(e) => return Ok(reject(id, e)),
                    };
                }
            }
            t
        }
    };
    if !accel.has_full_topology() {
        return Ok(reject(id, "missing sensor locations"));
    }
    let limb = match detect_stance_limb(&accel, &window) {
        Ok(d) => d.limb,
        Err(e) => return Ok(reject(id, e)),
    };
    if let Some(declared) = trial.stance_limb {
        if declared != limb {
            log::warn!("{id}: declared stance limb {} but detected {}", declared.as_str(), limb.as_str());
        }
    }
    let target = match build_target(force, &window, &trial.subject, cfg.encode.n_points) {
        Ok(t) => t,
        Err(e) => return Ok(reject(id, e)),
    };
    let mut accel = accel;
    accel.force = None;
    accel.stance_limb = Some(limb);
    Ok(Ok(PreparedTrial {
        split: assign_split(&cfg.split, cfg.seed, &trial.trial_id, trial.source_kind),
        trial: accel,
        window,
        movement,
        limb,
        target,
        hash,
    }))
}

fn mirror_target(target: &[f64]) -> Vec<f64> {
    target
        .chunks_exact(N_CHANNELS)
        .flat_map(|f| mirror_force_frame(f.try_into().expect("six channels")))
        .collect()
}

struct EncodedTrial {
    sample: EncodedSample,
    split: Split,
    rotations: Vec<String>,
}

fn encode_trial(cfg: &PipelineConfig, p: &PreparedTrial, mirror: bool) -> Result<EncodedTrial> {
    let (trial, target) = if mirror {
        let t = mirror_left_to_right(&p.trial).map_err(|e| PipelineError::Data(format!("{}: {e}", p.trial.trial_id)))?;
        (t, mirror_target(&p.target))
    } else {
        (p.trial.clone(), p.target.clone())
    };
    let (aligned, log) = align_trial(&trial, cfg.alignment).map_err(|e| PipelineError::Data(format!("{}: {e}", trial.trial_id)))?;
    let (image, scaling_record) = encode_image(&aligned, &p.window, &cfg.encode)?;
    let rotations = log
        .rotations
        .iter()
        .map(|r| {
            let m = r.rotation.rows();
            let mut line = format!("{},{},{},{}", trial.trial_id, r.location, mirror, r.fallback);
            for v in m.iter().flatten() {
                let _ = write!(line, ",{v}");
            }
            line
        })
        .collect();
    Ok(EncodedTrial {
        sample: EncodedSample {
            trial_id: trial.trial_id.clone(),
            image,
            target: None,
            waveform: Some(target),
            stance_limb: p.limb,
            mirrored: mirror,
            movement_class: p.movement,
            scaling_record,
            subject: trial.subject.clone(),
        },
        split: p.split,
        rotations,
    })
}

/// Physical-unit waveforms of a sample's stored target, reflected back to
/// the recorded limb when the sample was mirrored.
pub fn sample_truth(sample: &EncodedSample) -> Option<TrialWaveforms> {
    let w = sample.waveform.as_ref()?;
    let channels = crate::encode::denormalize(&crate::encode::deinterlace(w), &sample.subject);
    Some(if sample.mirrored { unmirror(channels) } else { channels })
}

fn unmirror(mut w: TrialWaveforms) -> TrialWaveforms {
    let n = w[0].len();
    for i in 0..n {
        let frame = mirror_force_frame(std::array::from_fn(|c| w[c][i]));
        for c in 0..N_CHANNELS {
            w[c][i] = frame[c];
        }
    }
    w
}

pub fn write_waveforms_csv(path: &Path, w: &TrialWaveforms) -> Result<()> {
    let mut text = CHANNEL_NAMES.join(",") + "\n";
    for i in 0..w[0].len() {
        let row: Vec<String> = w.iter().map(|c| c[i].to_string()).collect();
        text += &row.join(",");
        text.push('\n');
    }
    write_text(path, &text)
}

pub fn read_waveforms_csv(path: &Path) -> Result<TrialWaveforms> {
    let text = fs::read_to_string(path).map_err(io(path))?;
    let mut lines = text.lines();
    if lines.next() != Some(CHANNEL_NAMES.join(",").as_str()) {
        return Err(PipelineError::Data(format!("{}: unexpected header", path.display())));
    }
    let mut out: TrialWaveforms = Default::default();
    for (n, line) in lines.enumerate() {
        let vals: Vec<f64> = line
            .split(',')
            .map(str::parse)
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| PipelineError::Data(format!("{}:{}: {e}", path.display(), n + 2)))?;
        if vals.len() != N_CHANNELS {
            return Err(PipelineError::Data(format!("{}:{}: expected 6 values", path.display(), n + 2)));
        }
        for (c, v) in vals.into_iter().enumerate() {
            out[c].push(v);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrepareSummary {
    pub split: SplitManifest,
    pub experiments: Vec<ExperimentManifest>,
}

/// Ingests, converts, aligns and encodes the corpus, fits one output PCA per
/// experiment on its training targets, and writes everything under `out`.
pub fn prepare(cfg: &PipelineConfig, corpus: &Path, out: &Path) -> Result<PrepareSummary> {
    let cfg = cfg.resolved();
    cfg.validate()?;
    let entries = list_trial_dirs(corpus)?;
    let results: Vec<_> = entries.par_iter().map(|(id, dir)| prepare_trial(&cfg, id, dir)).collect::<Result<_>>()?;

    let mut seen = HashSet::new();
    let mut trials = Vec::new();
    let mut rejected = Vec::new();
    let mut duplicates = Vec::new();
    for r in results {
        match r {
            Ok(t) if !seen.insert(t.hash) => duplicates.push(t.trial.trial_id.clone()),
            Ok(t) => trials.push(t),
            Err(rej) => {
                log::warn!("rejected {}: {}", rej.trial_id, rej.reason);
                rejected.push(rej);
            }
        }
    }
    let ids = |s: Split| trials.iter().filter(|t| t.split == s).map(|t| t.trial.trial_id.clone()).collect();
    let split = SplitManifest {
        mode: cfg.split.mode,
        seed: cfg.seed,
        test_fraction: cfg.split.test_fraction,
        train: ids(Split::Train),
        test: ids(Split::Test),
        rejected,
        duplicates,
    };
    fs::create_dir_all(out).map_err(io(out))?;
    write_json(&out.join(SPLIT_JSON), &split)?;

    let mut experiments = Vec::new();
    for exp in &cfg.experiments {
        let selected: Vec<(&PreparedTrial, bool)> = trials
            .iter()
            .filter(|t| exp.movement.matches(t.movement))
            .filter_map(|t| match (exp.stance_limb, t.limb) {
                (LimbSubset::Combined, Limb::Left) => Some((t, true)),
                (LimbSubset::Combined, Limb::Right) => Some((t, false)),
                (LimbSubset::Left, Limb::Left) | (LimbSubset::Right, Limb::Right) => Some((t, false)),
                _ => None,
            })
            .collect();
        let n_train = selected.iter().filter(|(t, _)| t.split == Split::Train).count();
        let n_test = selected.len() - n_train;
        if n_train < 2 || n_test == 0 {
            return Err(PipelineError::EmptySubset(format!("{} ({n_train} train, {n_test} test)", exp.id)));
        }
        let encoded: Vec<EncodedTrial> = selected.par_iter().map(|(t, m)| encode_trial(&cfg, t, *m)).collect::<Result<_>>()?;
        let train_targets: Vec<Vec<f64>> = encoded
            .iter()
            .filter(|e| e.split == Split::Train)
            .map(|e| e.sample.waveform.clone().expect("prepared samples carry waveforms"))
            .collect();
        let pca = fit_output_pca(&train_targets, cfg.pca.variance_keep, cfg.pca.k_cap)?;

        let dir = out.join(&exp.id);
        let pca_checksum = pca.save(&dir)?;
        let mut rotation_lines = String::from("trial_id,location,mirrored,fallback,r00,r01,r02,r10,r11,r12,r20,r21,r22\n");
        let meta = ExperimentMeta {
            experiment_id: format!("{}.{}", cfg.experiment_id, exp.id),
            movement: String::from(exp.movement),
            stance_limb: exp.stance_limb.as_str().into(),
            alignment: cfg.alignment,
            n_train,
            n_test,
        };
        let mut record = ExperimentManifest {
            meta: meta.clone(),
            train: Vec::new(),
            test: Vec::new(),
            pca_checksum,
            k: pca.k(),
            input_size: cfg.encode.size,
            n_points: cfg.encode.n_points,
        };
        for e in encoded {
            let mut sample = e.sample;
            let waveform = sample.waveform.as_ref().expect("waveform present");
            sample.target = Some(pca.project(waveform)?);
            let sub = match e.split {
                Split::Train => {
                    record.train.push(sample.trial_id.clone());
                    "train"
                }
                Split::Test => {
                    record.test.push(sample.trial_id.clone());
                    let truth = sample_truth(&sample).expect("waveform present");
                    write_waveforms_csv(&dir.join("truth").join(format!("{}.csv", sample.trial_id)), &truth)?;
                    "test"
                }
            };
            let sdir = dir.join(sub);
            fs::create_dir_all(&sdir).map_err(io(&sdir))?;
            sample.save(&sdir)?;
            for line in e.rotations {
                rotation_lines += &line;
                rotation_lines.push('\n');
            }
        }
        write_text(&dir.join("rotations.csv"), &rotation_lines)?;
        write_json(&dir.join("truth").join(META_JSON), &meta)?;
        write_json(&dir.join(EXPERIMENT_JSON), &record)?;
        experiments.push(record);
    }
    let inputs = BTreeMap::from([("corpus".to_string(), digest_dir(corpus)?)]);
    finish_stage("prepare", &cfg, out, inputs)?;
    Ok(PrepareSummary { split, experiments })
}

fn load_samples(dir: &Path, ids: &[String]) -> Result<Vec<EncodedSample>> {
    ids.par_iter().map(|id| EncodedSample::load(dir, id).map_err(PipelineError::from)).collect()
}

fn load_experiment(prepared: &Path, id: &str) -> Result<(ExperimentManifest, OutputPcaModel)> {
    let dir = prepared.join(id);
    let record: ExperimentManifest = read_json(&dir.join(EXPERIMENT_JSON))?;
    let pca = OutputPcaModel::load(&dir)?;
    if pca.checksum() != record.pca_checksum {
        return Err(PipelineError::Checksum { what: format!("{id}/pca.bin"), expected: record.pca_checksum, actual: pca.checksum() });
    }
    Ok((record, pca))
}

// ---------------------------------------------------------------------------
// train / predict / evaluate

/// Trains one network per experiment on its prepared training samples.
pub fn train(cfg: &PipelineConfig, prepared: &Path, out: &Path) -> Result<Vec<WeightBundle>> {
    let cfg = cfg.resolved();
    cfg.validate()?;
    let parent = match &cfg.cascade.parent {
        Some(p) => Some(WeightBundle::load(p)?),
        None => None,
    };
    let mut bundles = Vec::new();
    let mut inputs = BTreeMap::from([("prepared".to_string(), stage_digest(prepared)?)]);
    if let Some(p) = &parent {
        inputs.insert("parent_model".into(), p.checksum());
    }
    for exp in &cfg.experiments {
        let (record, pca) = load_experiment(prepared, &exp.id)?;
        if record.input_size != cfg.encode.size {
            return Err(PipelineError::config("encode.size", format!("prepared images are {} px", record.input_size)));
        }
        let samples = load_samples(&prepared.join(&exp.id).join("train"), &record.train)?;
        let spec = cfg.network_spec(pca.k());
        let init = model::init_network(&spec, cfg.train.seed, parent.as_ref())?;
        let mut bundle = model::train(&init, &samples, &cfg.train)?;
        bundle.pca_checksum = Some(pca.checksum());
        let dir = out.join(&exp.id);
        bundle.save(&dir)?;
        // the model directory is self-contained for prediction
        pca.save(&dir)?;
        bundles.push(bundle);
    }
    finish_stage("train", &cfg, out, inputs)?;
    Ok(bundles)
}

/// Writes one waveform CSV per test trial and a `meta.json` per experiment.
pub fn predict(cfg: &PipelineConfig, models: &Path, prepared: &Path, out: &Path) -> Result<()> {
    let cfg = cfg.resolved();
    let inputs = BTreeMap::from([("models".to_string(), stage_digest(models)?), ("prepared".to_string(), stage_digest(prepared)?)]);
    for exp in &cfg.experiments {
        let (record, pca) = load_experiment(prepared, &exp.id)?;
        let bundle = WeightBundle::load(&models.join(&exp.id))?;
        let expected = bundle.pca_checksum.clone().unwrap_or_default();
        if expected != record.pca_checksum {
            return Err(PipelineError::Checksum { what: format!("{}: model vs prepared pca", exp.id), expected, actual: record.pca_checksum });
        }
        let samples = load_samples(&prepared.join(&exp.id).join("test"), &record.test)?;
        let dir = out.join(&exp.id);
        fs::create_dir_all(&dir).map_err(io(&dir))?;
        let preds: Vec<TrialWaveforms> =
            samples.par_iter().map(|s| model::predict_waveforms(&bundle, &pca, s)).collect::<std::result::Result<_, _>>()?;
        for (s, w) in samples.iter().zip(preds) {
            let w = if s.mirrored { unmirror(w) } else { w };
            write_waveforms_csv(&dir.join(format!("{}.csv", s.trial_id)), &w)?;
        }
        write_json(&dir.join(META_JSON), &record.meta)?;
    }
    finish_stage("predict", &cfg, out, inputs)
}

fn experiment_dirs(root: &Path) -> Result<Vec<String>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(root).map_err(io(root))? {
        let p = entry.map_err(io(root))?.path();
        if p.join(META_JSON).is_file() {
            out.push(p.file_name().expect("dir name").to_string_lossy().into_owned());
        }
    }
    out.sort();
    Ok(out)
}

fn csv_ids(dir: &Path) -> Result<Vec<String>> {
    let mut ids = Vec::new();
    for entry in fs::read_dir(dir).map_err(io(dir))? {
        let p = entry.map_err(io(dir))?.path();
        if p.extension().is_some_and(|e| e == "csv") {
            ids.push(p.file_stem().expect("file stem").to_string_lossy().into_owned());
        }
    }
    ids.sort();
    Ok(ids)
}

/// Compares predicted with measured waveforms for every experiment found in
/// `predictions`. `truth` may be a prepared directory (`<exp>/truth/`) or a
/// predictions-shaped directory (`<exp>/`).
pub fn evaluate(cfg: &PipelineConfig, predictions: &Path, truth: &Path, out: &Path) -> Result<Vec<EvalReport>> {
    let cfg = cfg.resolved();
    let inputs = BTreeMap::from([("predictions".to_string(), stage_digest(predictions)?), ("truth".to_string(), stage_digest(truth)?)]);
    let mut reports = Vec::new();
    let exps = experiment_dirs(predictions)?;
    if exps.is_empty() {
        return Err(PipelineError::Data(format!("{}: no prediction sets", predictions.display())));
    }
    for exp in exps {
        let pdir = predictions.join(&exp);
        let meta: ExperimentMeta = read_json(&pdir.join(META_JSON))?;
        let tdir = if truth.join(&exp).join("truth").is_dir() { truth.join(&exp).join("truth") } else { truth.join(&exp) };
        let ids = csv_ids(&pdir)?;
        let mut pred = Vec::with_capacity(ids.len());
        let mut real = Vec::with_capacity(ids.len());
        for id in &ids {
            pred.push(read_waveforms_csv(&pdir.join(format!("{id}.csv")))?);
            real.push(read_waveforms_csv(&tdir.join(format!("{id}.csv")))?);
        }
        let evaluation = eval::evaluate(meta, &pred, &real).map_err(|e| PipelineError::Data(format!("{exp}: {e}")))?;
        eval::emit_report(&evaluation, &out.join(&exp), cfg.eval.svg)?;
        reports.push(evaluation.report);
    }
    eval::write_report_csv(&reports, &out.join(eval::REPORT_CSV))?;
    finish_stage("evaluate", &cfg, out, inputs)?;
    Ok(reports)
}

fn fmt_r(v: Option<f64>) -> String {
    v.map_or_else(|| "  n/a".into(), |x| format!("{x:5.2}"))
}

/// Fixed-width table of one or more `report.csv` files, one row per experiment.
pub fn report(inputs: &[PathBuf]) -> Result<String> {
    let mut rows = Vec::new();
    for p in inputs {
        let path = if p.is_dir() { p.join(eval::REPORT_CSV) } else { p.clone() };
        if !path.is_file() {
            return Err(PipelineError::Io { path, source: std::io::ErrorKind::NotFound.into() });
        }
        rows.extend(eval::read_report_csv(&path).map_err(PipelineError::Data)?);
    }
    let mut out = format!(
        "{:<24} {:<12} {:<9} {:<5} {:>5} {:>5} {:>5} {:>5} {:>5} {:>5} {:>5} {:>5} {:>6} {:>6} {:>9}\n",
        "experiment", "movement", "limb", "align", "train", "test", "Fx", "Fy", "Fz", "Mx", "My", "Mz", "Fmean", "Mmean", "rRMSE Fz"
    );
    for r in &rows {
        let m = &r.meta;
        let _ = write!(out, "{:<24} {:<12} {:<9} {:<5} {:>5} {:>5}", m.experiment_id, m.movement, m.stance_limb, m.alignment, m.n_train, m.n_test);
        for c in &r.channels {
            let _ = write!(out, " {}", fmt_r(c.r));
        }
        let rrmse = r.channels[2].rrmse_pct.map_or_else(|| "n/a".into(), |v| format!("{v:.1}%"));
        let _ = writeln!(out, " {:>6} {:>6} {:>9}", fmt_r(r.f_mean_r), fmt_r(r.m_mean_r), rrmse);
    }
    Ok(out)
}

/// Hex digest of a config's canonical JSON.
pub fn config_digest(cfg: &PipelineConfig) -> String {
    sha256_hex(serde_json::to_string(cfg).expect("serializable").as_bytes())
}
