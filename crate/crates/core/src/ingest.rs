//! Trial directories on disk into canonical [`TrialRecord`] values.
//!
//! A trial directory holds a `trial.json` manifest plus one CSV per track.
//! Sensor CSVs carry `t,x,y,z`, the force CSV `t,fx,fy,fz,mx,my,mz`. Rows are
//! placed on the frame grid by `round(t * rate_hz)`; frames without a row are
//! missing and become NaN until [`quality_gate`] fills or rejects them.

use crate::gait::{self, ContactParams};
use crate::hash::Sha256Writer;
use crate::trial::*;
use serde::{Deserialize, Serialize};
use std::fmt::{self, Write as _};
use std::fs;
use std::path::{Path, PathBuf};
use thiserror::Error;

pub const MANIFEST_FILE: &str = "trial.json";

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("missing file {path}: {detail}")]
    MissingFile { path: PathBuf, detail: String },
    #[error("malformed CSV {path} line {line}: {detail}")]
    MalformedCsv { path: PathBuf, line: u64, detail: String },
    #[error("unit error in {path}: {detail}")]
    UnitError { path: PathBuf, detail: String },
    #[error("unknown sensor name {name:?} in {path}")]
    UnknownSensorName { path: PathBuf, name: String },
    #[error("inconsistent tracks in {path}: {detail}")]
    InconsistentTracks { path: PathBuf, detail: String },
    #[error("bad manifest {path}: {source}")]
    Manifest {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Error, PartialEq)]
pub enum ResampleError {
    #[error("target rate {target_hz} Hz exceeds source rate {rate_hz} Hz")]
    UpsampleRequested { rate_hz: f64, target_hz: f64 },
    #[error("track has {0} samples, at least 2 required")]
    TooShort(usize),
    #[error("rates must be positive and finite")]
    InvalidRate,
}

// ---------------------------------------------------------------------------
// Manifest

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SensorEntry {
    pub location: String,
    pub file: String,
    pub rate_hz: f64,
    pub kind: TrackKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub units: Option<String>,
    /// Canonical axis held by each CSV column, e.g. `"yxz"`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub axes: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ForceEntry {
    pub file: String,
    pub rate_hz: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub force_units: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub moment_units: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrialManifest {
    pub trial_id: String,
    pub subject: SubjectMeta,
    pub sensors: Vec<SensorEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub force: Option<ForceEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub movement_label: Option<MovementClass>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_kind: Option<SourceKind>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stance_limb: Option<Limb>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub mirrored: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub oracle: Option<OracleTruth>,
}

fn sensor_scale(kind: TrackKind, units: Option<&str>) -> Option<f64> {
    match (kind, units.map(str::trim)) {
        (TrackKind::Position, None | Some("m")) => Some(1.0),
        (TrackKind::Position, Some("cm")) => Some(0.01),
        (TrackKind::Position, Some("mm")) => Some(0.001),
        (TrackKind::Acceleration | TrackKind::Magnitude, None | Some("m/s2") | Some("m/s^2")) => Some(1.0),
        (TrackKind::Acceleration | TrackKind::Magnitude, Some("g")) => Some(GRAVITY),
        _ => None,
    }
}

fn force_scale(units: Option<&str>) -> Option<f64> {
    match units.map(str::trim) {
        None | Some("N") => Some(1.0),
        Some("kN") => Some(1000.0),
        _ => None,
    }
}

fn moment_scale(units: Option<&str>) -> Option<f64> {
    match units.map(str::trim) {
        None | Some("N.m") | Some("Nm") => Some(1.0),
        Some("N.mm") | Some("Nmm") => Some(0.001),
        _ => None,
    }
}

fn axis_permutation(axes: Option<&str>) -> Option<[usize; 3]> {
    let Some(axes) = axes else {
        return Some([0, 1, 2]);
    };
    let chars: Vec<char> = axes.trim().to_ascii_lowercase().chars().collect();
    if chars.len() != 3 {
        return None;
    }
    let mut perm = [0usize; 3];
    let mut seen = [false; 3];
    for (i, c) in chars.iter().enumerate() {
        let axis = match c {
            'x' => 0,
            'y' => 1,
            'z' => 2,
            _ => return None,
        };
        if seen[axis] {
            return None;
        }
        seen[axis] = true;
        perm[i] = axis;
    }
    Some(perm)
}

// ---------------------------------------------------------------------------
// Parsing

/// Reads rows of `t,<N values>` and places them on the frame grid.
/// Absent frames are returned as `None`.
fn read_rows<const N: usize>(
    path: &Path,
    rate_hz: f64,
    header: &[&str],
) -> Result<Vec<Option<[f64; N]>>, IngestError> {
    let file = fs::File::open(path).map_err(|e| IngestError::MissingFile {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })?;
    let mut reader = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(file);
    let malformed = |line: u64, detail: String| IngestError::MalformedCsv {
        path: path.to_path_buf(),
        line,
        detail,
    };
    let found: Vec<String> = reader
        .headers()
        .map_err(|e| malformed(1, e.to_string()))?
        .iter()
        .map(|h| h.to_ascii_lowercase())
        .collect();
    if found.len() != header.len() || found.iter().zip(header).any(|(a, b)| a != b) {
        return Err(malformed(1, format!("expected header {}, found {}", header.join(","), found.join(","))));
    }

    let mut rows: Vec<Option<[f64; N]>> = Vec::new();
    let mut t0: Option<f64> = None;
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map(|p| p.line()).unwrap_or(0);
            malformed(line, e.to_string())
        })?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        if record.len() != N + 1 {
            return Err(malformed(line, format!("expected {} columns, found {}", N + 1, record.len())));
        }
        let mut values = [0.0; N];
        let mut t = 0.0;
        for (col, field) in record.iter().enumerate() {
            let v: f64 = field
                .parse()
                .map_err(|_| malformed(line, format!("column {}: cannot parse {field:?}", col + 1)))?;
            if !v.is_finite() {
                return Err(malformed(line, format!("column {}: non-finite value {field:?}", col + 1)));
            }
            if col == 0 {
                t = v;
            } else {
                values[col - 1] = v;
            }
        }
        let start = *t0.get_or_insert(t);
        let frame_f = ((t - start) * rate_hz).round();
        if frame_f < 0.0 {
            return Err(malformed(line, format!("time {t} precedes first row")));
        }
        let frame = frame_f as usize;
        if frame < rows.len() {
            return Err(malformed(line, format!("time {t} is not increasing")));
        }
        rows.resize(frame, None);
        rows.push(Some(values));
    }
    Ok(rows)
}

fn read_manifest(dir: &Path) -> Result<TrialManifest, IngestError> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| IngestError::MissingFile {
        path: path.clone(),
        detail: e.to_string(),
    })?;
    serde_json::from_str(&text).map_err(|source| IngestError::Manifest { path, source })
}

/// Parses a trial directory.
pub fn parse_trial(dir: &Path) -> Result<TrialRecord, IngestError> {
    let manifest = read_manifest(dir)?;
    let manifest_path = dir.join(MANIFEST_FILE);

    if !(manifest.subject.is_valid()) {
        return Err(IngestError::UnitError {
            path: manifest_path,
            detail: "subject mass and height must be positive".into(),
        });
    }

    let mut sensors = Vec::with_capacity(manifest.sensors.len());
    for entry in &manifest.sensors {
        let location = SensorLocation::from_name(&entry.location).ok_or_else(|| IngestError::UnknownSensorName {
            path: manifest_path.clone(),
            name: entry.location.clone(),
        })?;
        let path = dir.join(&entry.file);
        if !(entry.rate_hz.is_finite() && entry.rate_hz > 0.0) {
            return Err(IngestError::UnitError { path, detail: format!("invalid rate {}", entry.rate_hz) });
        }
        let scale = sensor_scale(entry.kind, entry.units.as_deref()).ok_or_else(|| IngestError::UnitError {
            path: path.clone(),
            detail: format!("unit {:?} not valid for {:?} track", entry.units, entry.kind),
        })?;
        let perm = axis_permutation(entry.axes.as_deref()).ok_or_else(|| IngestError::UnitError {
            path: path.clone(),
            detail: format!("axes {:?} is not a permutation of xyz", entry.axes),
        })?;
        let rows = read_rows::<3>(&path, entry.rate_hz, &["t", "x", "y", "z"])?;
        let samples = rows
            .into_iter()
            .map(|row| match row {
                Some(v) => {
                    let mut out = [0.0; 3];
                    for (col, axis) in perm.iter().enumerate() {
                        out[*axis] = v[col] * scale;
                    }
                    out
                }
                None => [f64::NAN; 3],
            })
            .collect();
        if sensors.iter().any(|s: &SensorTrack| s.location == location) {
            return Err(IngestError::InconsistentTracks {
                path: manifest_path.clone(),
                detail: format!("sensor {location} listed twice"),
            });
        }
        sensors.push(SensorTrack::new(location, entry.rate_hz, entry.kind, samples));
    }

    for loc in SensorLocation::ALL {
        if !sensors.iter().any(|s| s.location == loc) {
            return Err(IngestError::MissingFile {
                path: manifest_path.clone(),
                detail: format!("no track for sensor {loc}; five locations are required"),
            });
        }
    }
    sensors.sort_by_key(|s| s.location);
    let rate = sensors[0].rate_hz;
    let len = sensors[0].len();
    for s in &sensors {
        if s.rate_hz != rate || s.len() != len {
            return Err(IngestError::InconsistentTracks {
                path: manifest_path.clone(),
                detail: format!(
                    "sensor {} has {} frames at {} Hz, expected {len} at {rate} Hz",
                    s.location,
                    s.len(),
                    s.rate_hz
                ),
            });
        }
    }

    let force = match &manifest.force {
        None => None,
        Some(entry) => {
            let path = dir.join(&entry.file);
            if !(entry.rate_hz.is_finite() && entry.rate_hz > 0.0) {
                return Err(IngestError::UnitError { path, detail: format!("invalid rate {}", entry.rate_hz) });
            }
            let fs = force_scale(entry.force_units.as_deref()).ok_or_else(|| IngestError::UnitError {
                path: path.clone(),
                detail: format!("unknown force unit {:?}", entry.force_units),
            })?;
            let ms = moment_scale(entry.moment_units.as_deref()).ok_or_else(|| IngestError::UnitError {
                path: path.clone(),
                detail: format!("unknown moment unit {:?}", entry.moment_units),
            })?;
            let rows = read_rows::<6>(&path, entry.rate_hz, &["t", "fx", "fy", "fz", "mx", "my", "mz"])?;
            let mut channels = Vec::with_capacity(rows.len());
            for (frame, row) in rows.into_iter().enumerate() {
                let Some(v) = row else {
                    return Err(IngestError::MalformedCsv {
                        path: path.clone(),
                        line: frame as u64 + 2,
                        detail: format!("force frame {frame} missing; force tracks must be contiguous"),
                    });
                };
                channels.push([v[0] * fs, v[1] * fs, v[2] * fs, v[3] * ms, v[4] * ms, v[5] * ms]);
            }
            if channels.len() < 2 {
                return Err(IngestError::MalformedCsv {
                    path,
                    line: 2,
                    detail: "force track needs at least 2 frames".into(),
                });
            }
            Some(ForceTrack::new(entry.rate_hz, channels))
        }
    };

    let source_kind = manifest.source_kind.unwrap_or(if sensors[0].kind == TrackKind::Position {
        SourceKind::Markers
    } else {
        SourceKind::Accelerometers
    });

    Ok(TrialRecord {
        trial_id: manifest.trial_id,
        subject: manifest.subject,
        sensors,
        force,
        movement_label: manifest.movement_label,
        source_kind,
        stance_limb: manifest.stance_limb,
        mirrored: manifest.mirrored,
        oracle: manifest.oracle,
    })
}

// ---------------------------------------------------------------------------
// Writing

fn push_row(out: &mut String, t: f64, values: &[f64]) {
    let _ = write!(out, "{t}");
    for v in values {
        let _ = write!(out, ",{v}");
    }
    out.push('\n');
}

fn track_file_name(loc: SensorLocation) -> String {
    format!("{}.csv", loc.name())
}

/// Manifest describing `trial` as it would be written by [`write_trial`].
pub fn manifest_for(trial: &TrialRecord) -> TrialManifest {
    TrialManifest {
        trial_id: trial.trial_id.clone(),
        subject: trial.subject.clone(),
        sensors: trial
            .sensors
            .iter()
            .map(|s| SensorEntry {
                location: s.location.name().to_string(),
                file: track_file_name(s.location),
                rate_hz: s.rate_hz,
                kind: s.kind,
                units: None,
                axes: None,
            })
            .collect(),
        force: trial.force.as_ref().map(|f| ForceEntry {
            file: "force.csv".into(),
            rate_hz: f.rate_hz,
            force_units: None,
            moment_units: None,
        }),
        movement_label: trial.movement_label,
        source_kind: Some(trial.source_kind),
        stance_limb: trial.stance_limb,
        mirrored: trial.mirrored,
        oracle: trial.oracle.clone(),
    }
}

/// Writes `trial` in the directory format read by [`parse_trial`]. Values are
/// printed in shortest round-trip form, so re-parsing is bit-exact. Missing
/// (NaN) sensor frames are written as absent rows.
pub fn write_trial(trial: &TrialRecord, dir: &Path) -> Result<(), IngestError> {
    let io = |path: &Path| {
        let path = path.to_path_buf();
        move |source| IngestError::Io { path, source }
    };
    fs::create_dir_all(dir).map_err(io(dir))?;
    for track in &trial.sensors {
        let mut text = String::from("t,x,y,z\n");
        for (i, s) in track.samples.iter().enumerate() {
            if s.iter().any(|v| v.is_nan()) {
                continue;
            }
            push_row(&mut text, i as f64 / track.rate_hz, s);
        }
        let path = dir.join(track_file_name(track.location));
        fs::write(&path, text).map_err(io(&path))?;
    }
    if let Some(force) = &trial.force {
        let mut text = String::from("t,fx,fy,fz,mx,my,mz\n");
        for (i, c) in force.channels.iter().enumerate() {
            push_row(&mut text, i as f64 / force.rate_hz, c);
        }
        let path = dir.join("force.csv");
        fs::write(&path, text).map_err(io(&path))?;
    }
    let manifest = manifest_for(trial);
    let path = dir.join(MANIFEST_FILE);
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, json + "\n").map_err(io(&path))?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Resampling

/// Linear interpolation of `samples` at fractional index `pos`.
pub(crate) fn lerp_at<const N: usize>(samples: &[[f64; N]], pos: f64) -> [f64; N] {
    let last = samples.len() - 1;
    if pos <= 0.0 {
        return samples[0];
    }
    if pos >= last as f64 {
        return samples[last];
    }
    let i = pos.floor() as usize;
    let frac = pos - i as f64;
    if frac == 0.0 {
        return samples[i];
    }
    let (a, b) = (samples[i], samples[i + 1]);
    let mut out = [0.0; N];
    for k in 0..N {
        out[k] = (1.0 - frac) * a[k] + frac * b[k];
    }
    out
}

/// Resamples a uniform series from `rate_hz` onto a `target_hz` grid spanning
/// the same time extent. The first sample is kept exactly.
pub fn resample_series<const N: usize>(
    samples: &[[f64; N]],
    rate_hz: f64,
    target_hz: f64,
) -> Result<Vec<[f64; N]>, ResampleError> {
    if !(rate_hz.is_finite() && rate_hz > 0.0 && target_hz.is_finite() && target_hz > 0.0) {
        return Err(ResampleError::InvalidRate);
    }
    if target_hz > rate_hz {
        return Err(ResampleError::UpsampleRequested { rate_hz, target_hz });
    }
    if samples.len() < 2 {
        return Err(ResampleError::TooShort(samples.len()));
    }
    if target_hz == rate_hz {
        return Ok(samples.to_vec());
    }
    let last = (samples.len() - 1) as f64;
    // number of whole target periods inside the source extent
    let n_out = ((last * target_hz / rate_hz) + 1e-9).floor() as usize + 1;
    Ok((0..n_out)
        .map(|j| {
            let pos = j as f64 * rate_hz / target_hz;
            lerp_at(samples, pos.min(last))
        })
        .collect())
}

pub fn resample_uniform(track: &SensorTrack, target_hz: f64) -> Result<SensorTrack, ResampleError> {
    let samples = resample_series(&track.samples, track.rate_hz, target_hz)?;
    Ok(SensorTrack { samples, rate_hz: target_hz, ..track.clone() })
}

// ---------------------------------------------------------------------------
// Quality gate

#[derive(Debug, Clone, PartialEq)]
pub enum RejectReason {
    GapTooLong { location: SensorLocation, start: usize, len: usize },
    NoContact,
    DurationTooShort { duration_s: f64 },
}

impl fmt::Display for RejectReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RejectReason::GapTooLong { location, start, len } => {
                write!(f, "gap of {len} frames at frame {start} on {location}")
            }
            RejectReason::NoContact => f.write_str("force never exceeds the contact threshold"),
            RejectReason::DurationTooShort { duration_s } => write!(f, "trial lasts only {duration_s} s"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GateConfig {
    pub max_gap_frames: usize,
    pub min_duration_s: f64,
    pub contact: ContactParams,
}

impl Default for GateConfig {
    fn default() -> Self {
        GateConfig { max_gap_frames: 10, min_duration_s: 0.1, contact: ContactParams::default() }
    }
}

/// Natural cubic spline through `(xs, ys)` evaluated at `x`.
fn natural_spline_eval(xs: &[f64], ys: &[f64], x: f64) -> f64 {
    let n = xs.len();
    if n == 1 {
        return ys[0];
    }
    if n == 2 {
        let t = (x - xs[0]) / (xs[1] - xs[0]);
        return (1.0 - t) * ys[0] + t * ys[1];
    }
    // second derivatives via the tridiagonal system, m[0] = m[n-1] = 0
    let h: Vec<f64> = xs.windows(2).map(|w| w[1] - w[0]).collect();
    let mut m = vec![0.0; n];
    let mut diag = vec![0.0; n];
    let mut rhs = vec![0.0; n];
    for i in 1..n - 1 {
        diag[i] = 2.0 * (h[i - 1] + h[i]);
        rhs[i] = 6.0 * ((ys[i + 1] - ys[i]) / h[i] - (ys[i] - ys[i - 1]) / h[i - 1]);
    }
    for i in 2..n - 1 {
        let w = h[i - 1] / diag[i - 1];
        diag[i] -= w * h[i - 1];
        rhs[i] -= w * rhs[i - 1];
    }
    for i in (1..n - 1).rev() {
        m[i] = (rhs[i] - h[i] * m[i + 1]) / diag[i];
    }
    let k = match xs.iter().position(|&v| v > x) {
        Some(0) => 0,
        Some(p) => p - 1,
        None => n - 2,
    };
    let (x0, x1, hk) = (xs[k], xs[k + 1], h[k]);
    let a = (x1 - x) / hk;
    let b = (x - x0) / hk;
    a * ys[k] + b * ys[k + 1] + ((a * a * a - a) * m[k] + (b * b * b - b) * m[k + 1]) * hk * hk / 6.0
}

const SPLINE_SUPPORT: usize = 4;

fn fill_gap(samples: &mut [Vec3], start: usize, len: usize) {
    let end = start + len; // first valid frame after the gap
    let before: Vec<usize> = (0..start).rev().take(SPLINE_SUPPORT).collect::<Vec<_>>().into_iter().rev().collect();
    let after: Vec<usize> = (end..samples.len()).take(SPLINE_SUPPORT).collect();
    if before.is_empty() || after.is_empty() {
        // edge gap: hold the nearest valid frame
        let hold = if before.is_empty() { samples[end] } else { samples[start - 1] };
        for s in &mut samples[start..end] {
            *s = hold;
        }
        return;
    }
    let knots: Vec<usize> = before.into_iter().chain(after).collect();
    let xs: Vec<f64> = knots.iter().map(|&k| k as f64).collect();
    for axis in 0..3 {
        let ys: Vec<f64> = knots.iter().map(|&k| samples[k][axis]).collect();
        for f in start..end {
            samples[f][axis] = natural_spline_eval(&xs, &ys, f as f64);
        }
    }
}

/// Frames holding any NaN, as `(start, len)` runs.
fn missing_runs(samples: &[Vec3]) -> Vec<(usize, usize)> {
    let mut runs = Vec::new();
    let mut i = 0;
    while i < samples.len() {
        if samples[i].iter().any(|v| v.is_nan()) {
            let start = i;
            while i < samples.len() && samples[i].iter().any(|v| v.is_nan()) {
                i += 1;
            }
            runs.push((start, i - start));
        } else {
            i += 1;
        }
    }
    runs
}

/// Accepts a trial (filling short gaps) or returns the reason it is rejected.
pub fn quality_gate(trial: &TrialRecord, cfg: &GateConfig) -> Result<TrialRecord, RejectReason> {
    let mut out = trial.clone();
    for track in &mut out.sensors {
        let valid = track.samples.iter().filter(|s| s.iter().all(|v| v.is_finite())).count();
        let duration_s = track.duration_s();
        if valid < 2 || duration_s < cfg.min_duration_s {
            return Err(RejectReason::DurationTooShort { duration_s });
        }
        for (start, len) in missing_runs(&track.samples) {
            if len > cfg.max_gap_frames {
                return Err(RejectReason::GapTooLong { location: track.location, start, len });
            }
            fill_gap(&mut track.samples, start, len);
        }
    }
    if let Some(force) = &out.force {
        if force.len() < 2 {
            return Err(RejectReason::DurationTooShort { duration_s: 0.0 });
        }
        if gait::detect_stance_events(force, &cfg.contact).is_err() {
            return Err(RejectReason::NoContact);
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Deduplication

/// SHA-256 over the sensor samples (canonical location order) and force
/// samples, each value as its little-endian bit pattern.
pub fn content_hash(trial: &TrialRecord) -> [u8; 32] {
    let mut h = Sha256Writer::new();
    let mut sensors: Vec<&SensorTrack> = trial.sensors.iter().collect();
    sensors.sort_by_key(|s| s.location);
    for s in sensors {
        h.update(&[b'S', s.location.index() as u8]);
        h.update(&(s.samples.len() as u64).to_le_bytes());
        for v in s.samples.iter().flatten() {
            h.update(&v.to_bits().to_le_bytes());
        }
    }
    if let Some(force) = &trial.force {
        h.update(b"F");
        h.update(&(force.channels.len() as u64).to_le_bytes());
        for v in force.channels.iter().flatten() {
            h.update(&v.to_bits().to_le_bytes());
        }
    }
    h.finish()
}

/// Drops trials whose content duplicates an earlier one, keeping order.
pub fn dedupe(trials: Vec<TrialRecord>) -> Vec<TrialRecord> {
    let mut seen = std::collections::HashSet::new();
    trials.into_iter().filter(|t| seen.insert(content_hash(t))).collect()
}
