//! Image encoding of aligned accelerations and the interlaced, PCA-reduced
//! force/moment targets.
//!
//! Image layout: five sensor columns in canonical order, stance-normalized
//! frames on rows with row 0 holding the last stance frame, channels
//! R←x, G←y, B←z.

use crate::gait::{normalize_stance, GaitError, StanceWindow};
use crate::hash::sha256_hex;
use crate::trial::*;
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use thiserror::Error;

pub const N_CHANNELS: usize = 6;
pub const CHANNEL_NAMES: [&str; N_CHANNELS] = ["Fx", "Fy", "Fz", "Mx", "My", "Mz"];

#[derive(Debug, Error)]
pub enum EncodeError {
    #[error("trial has no {0} track")]
    MissingSensor(SensorLocation),
    #[error("stance window is empty")]
    EmptyWindow,
    #[error(transparent)]
    Gait(#[from] GaitError),
    #[error("trial has no force track")]
    MissingForce,
    #[error("subject mass and height must be positive")]
    InvalidSubject,
    #[error("need at least 2 targets, got {0}")]
    TooFewSamples(usize),
    #[error("expected length {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("checksum mismatch for {path}: expected {expected}, found {actual}")]
    ChecksumMismatch { path: PathBuf, expected: String, actual: String },
    #[error("{path}: {detail}")]
    Format { path: PathBuf, detail: String },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> EncodeError + '_ {
    move |source| EncodeError::Io { path: path.to_path_buf(), source }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncodeConfig {
    /// Output image side length.
    pub size: usize,
    pub n_points: usize,
    /// Map `[-r, r]` m/s² onto the byte range instead of per-image min-max.
    pub fixed_range_mps2: Option<f64>,
    /// Row 0 holds the last stance frame (time runs upwards).
    pub time_upwards: bool,
}

impl Default for EncodeConfig {
    fn default() -> Self {
        EncodeConfig { size: 227, n_points: 101, fixed_range_mps2: None, time_upwards: true }
    }
}

/// Per-channel `(min, max)` used for the byte mapping.
pub type ScalingRecord = [(f64, f64); 3];

/// `rows × 5 × 3` values before quantization, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid<T> {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<[T; 3]>,
}

impl<T: Copy> Grid<T> {
    pub fn at(&self, row: usize, col: usize) -> [T; 3] {
        self.data[row * self.cols + col]
    }
}

/// Square RGB image, row-major, interleaved channels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    pub size: usize,
    pub pixels: Vec<u8>,
}

impl RgbImage {
    pub fn pixel(&self, row: usize, col: usize) -> [u8; 3] {
        let i = 3 * (row * self.size + col);
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    pub fn is_grayscale(&self) -> bool {
        self.pixels.chunks_exact(3).all(|p| p[0] == p[1] && p[1] == p[2])
    }
}

/// Stance-normalized acceleration grid of the five sensors.
pub fn acceleration_grid(trial: &TrialRecord, window: &StanceWindow, cfg: &EncodeConfig) -> Result<Grid<f64>, EncodeError> {
    if window.to_frame <= window.fs_frame {
        return Err(EncodeError::EmptyWindow);
    }
    let n = cfg.n_points;
    let mut columns = Vec::with_capacity(5);
    for loc in SensorLocation::ALL {
        let track = trial.sensor(loc).ok_or(EncodeError::MissingSensor(loc))?;
        columns.push(normalize_stance(&track.samples, track.rate_hz, window, n)?);
    }
    let mut data = Vec::with_capacity(n * 5);
    for row in 0..n {
        let frame = if cfg.time_upwards { n - 1 - row } else { row };
        for col in &columns {
            data.push(col[frame]);
        }
    }
    Ok(Grid { rows: n, cols: 5, data })
}

fn to_byte(v: f64, lo: f64, hi: f64) -> u8 {
    if hi <= lo {
        return 0;
    }
    (255.0 * (v - lo) / (hi - lo)).round().clamp(0.0, 255.0) as u8
}

/// Byte mapping `round(255 (v - min) / (max - min))` per channel over the whole
/// grid. A constant channel maps to 0.
pub fn quantize_grid(grid: &Grid<f64>, fixed_range_mps2: Option<f64>) -> (Grid<u8>, ScalingRecord) {
    let mut scaling = [(f64::INFINITY, f64::NEG_INFINITY); 3];
    match fixed_range_mps2 {
        Some(r) => scaling = [(-r, r); 3],
        None => {
            for v in &grid.data {
                for c in 0..3 {
                    scaling[c].0 = scaling[c].0.min(v[c]);
                    scaling[c].1 = scaling[c].1.max(v[c]);
                }
            }
        }
    }
    let data = grid
        .data
        .iter()
        .map(|v| std::array::from_fn(|c| to_byte(v[c], scaling[c].0, scaling[c].1)))
        .collect();
    (Grid { rows: grid.rows, cols: grid.cols, data }, scaling)
}

/// Inverse of [`quantize_grid`]; a constant channel decodes to its recorded value.
pub fn decode_image_grid(bytes: &Grid<u8>, scaling: &ScalingRecord) -> Grid<f64> {
    let data = bytes
        .data
        .iter()
        .map(|b| {
            std::array::from_fn(|c| {
                let (lo, hi) = scaling[c];
                if hi <= lo {
                    lo
                } else {
                    lo + f64::from(b[c]) / 255.0 * (hi - lo)
                }
            })
        })
        .collect();
    Grid { rows: bytes.rows, cols: bytes.cols, data }
}

/// Bilinear resize with corner alignment onto `size × size`.
pub fn resize_bilinear(grid: &Grid<u8>, size: usize) -> RgbImage {
    let mut pixels = Vec::with_capacity(size * size * 3);
    let scale = |n: usize| if size > 1 { (n - 1) as f64 / (size - 1) as f64 } else { 0.0 };
    let (sy, sx) = (scale(grid.rows), scale(grid.cols));
    for i in 0..size {
        let y = i as f64 * sy;
        let y0 = (y.floor() as usize).min(grid.rows - 1);
        let y1 = (y0 + 1).min(grid.rows - 1);
        let fy = y - y0 as f64;
        for j in 0..size {
            let x = j as f64 * sx;
            let x0 = (x.floor() as usize).min(grid.cols - 1);
            let x1 = (x0 + 1).min(grid.cols - 1);
            let fx = x - x0 as f64;
            let (a, b, c, d) = (grid.at(y0, x0), grid.at(y0, x1), grid.at(y1, x0), grid.at(y1, x1));
            for ch in 0..3 {
                let top = (1.0 - fx) * f64::from(a[ch]) + fx * f64::from(b[ch]);
                let bottom = (1.0 - fx) * f64::from(c[ch]) + fx * f64::from(d[ch]);
                let v = (1.0 - fy) * top + fy * bottom;
                pixels.push(v.round().clamp(0.0, 255.0) as u8);
            }
        }
    }
    RgbImage { size, pixels }
}

/// Image of one aligned trial plus the scaling that produced it.
pub fn encode_image(trial: &TrialRecord, window: &StanceWindow, cfg: &EncodeConfig) -> Result<(RgbImage, ScalingRecord), EncodeError> {
    let grid = acceleration_grid(trial, window, cfg)?;
    let (bytes, scaling) = quantize_grid(&grid, cfg.fixed_range_mps2);
    Ok((resize_bilinear(&bytes, cfg.size), scaling))
}

/// Stance-normalized force/moment channels scaled to body weight and body
/// weight · height, interlaced frame-major: `[Fx(t0), Fy(t0), ..., Mz(t0), Fx(t1), ...]`.
pub fn build_target(force: &ForceTrack, window: &StanceWindow, subject: &SubjectMeta, n_points: usize) -> Result<Vec<f64>, EncodeError> {
    if !subject.is_valid() {
        return Err(EncodeError::InvalidSubject);
    }
    let frames = normalize_stance(&force.channels, force.rate_hz, window, n_points)?;
    let bw = subject.body_weight_n();
    let bwh = bw * subject.height_m;
    let mut out = Vec::with_capacity(N_CHANNELS * n_points);
    for f in frames {
        out.extend_from_slice(&[f[0] / bw, f[1] / bw, f[2] / bw, f[3] / bwh, f[4] / bwh, f[5] / bwh]);
    }
    Ok(out)
}

/// Splits an interlaced target into its six channels.
pub fn deinterlace(target: &[f64]) -> [Vec<f64>; N_CHANNELS] {
    std::array::from_fn(|c| target.iter().skip(c).step_by(N_CHANNELS).copied().collect())
}

pub fn interlace(channels: &[Vec<f64>; N_CHANNELS]) -> Vec<f64> {
    let n = channels[0].len();
    (0..n).flat_map(|i| channels.iter().map(move |ch| ch[i])).collect()
}

/// Converts normalized channels back to N and N·m.
pub fn denormalize(channels: &[Vec<f64>; N_CHANNELS], subject: &SubjectMeta) -> [Vec<f64>; N_CHANNELS] {
    let bw = subject.body_weight_n();
    std::array::from_fn(|c| {
        let scale = if c < 3 { bw } else { bw * subject.height_m };
        channels[c].iter().map(|v| v * scale).collect()
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChannelScale {
    BodyWeight,
    BodyWeightHeight,
}

pub const CHANNEL_SCALES: [ChannelScale; N_CHANNELS] = [
    ChannelScale::BodyWeight,
    ChannelScale::BodyWeight,
    ChannelScale::BodyWeight,
    ChannelScale::BodyWeightHeight,
    ChannelScale::BodyWeightHeight,
    ChannelScale::BodyWeightHeight,
];

#[derive(Debug, Clone, PartialEq)]
pub struct OutputPcaModel {
    pub mean: Vec<f64>,
    /// `K` orthonormal rows of length `mean.len()`.
    pub basis: Vec<Vec<f64>>,
    pub explained_variance: Vec<f64>,
    pub variance_keep: f64,
    pub k_cap: usize,
    pub n_points: usize,
    pub normalization: [ChannelScale; N_CHANNELS],
}

impl OutputPcaModel {
    pub fn k(&self) -> usize {
        self.basis.len()
    }

    pub fn dims(&self) -> usize {
        self.mean.len()
    }

    pub fn project(&self, target: &[f64]) -> Result<Vec<f64>, EncodeError> {
        if target.len() != self.dims() {
            return Err(EncodeError::DimensionMismatch { expected: self.dims(), actual: target.len() });
        }
        Ok(self
            .basis
            .iter()
            .map(|row| row.iter().zip(target).zip(&self.mean).map(|((b, t), m)| b * (t - m)).sum())
            .collect())
    }

    pub fn reconstruct(&self, coeffs: &[f64]) -> Result<Vec<f64>, EncodeError> {
        if coeffs.len() != self.k() {
            return Err(EncodeError::DimensionMismatch { expected: self.k(), actual: coeffs.len() });
        }
        let mut out = self.mean.clone();
        for (row, c) in self.basis.iter().zip(coeffs) {
            for (o, b) in out.iter_mut().zip(row) {
                *o += c * b;
            }
        }
        Ok(out)
    }

    /// Flat little-endian f64 layout: mean, basis rows, explained variance.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 * (self.dims() * (self.k() + 1) + self.k()));
        let values = self.mean.iter().chain(self.basis.iter().flatten()).chain(&self.explained_variance);
        for v in values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn checksum(&self) -> String {
        sha256_hex(&self.to_bytes())
    }

    /// Writes `pca.bin` and `pca.json` into `dir` and returns the checksum.
    pub fn save(&self, dir: &Path) -> Result<String, EncodeError> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let bytes = self.to_bytes();
        let checksum = sha256_hex(&bytes);
        let bin = dir.join(PCA_BIN);
        fs::write(&bin, &bytes).map_err(io_err(&bin))?;
        let manifest = PcaManifest {
            dims: self.dims(),
            k: self.k(),
            n_points: self.n_points,
            variance_keep: self.variance_keep,
            k_cap: self.k_cap,
            normalization: self.normalization,
            layout: "f64 little-endian: mean[dims], basis[k][dims], explained_variance[k]".into(),
            checksum: checksum.clone(),
        };
        let json = dir.join(PCA_JSON);
        fs::write(&json, serde_json::to_string_pretty(&manifest).expect("manifest serializes") + "\n").map_err(io_err(&json))?;
        Ok(checksum)
    }

    pub fn load(dir: &Path) -> Result<OutputPcaModel, EncodeError> {
        let json = dir.join(PCA_JSON);
        let text = fs::read_to_string(&json).map_err(io_err(&json))?;
        let manifest: PcaManifest =
            serde_json::from_str(&text).map_err(|e| EncodeError::Format { path: json.clone(), detail: e.to_string() })?;
        let bin = dir.join(PCA_BIN);
        let bytes = fs::read(&bin).map_err(io_err(&bin))?;
        let actual = sha256_hex(&bytes);
        if actual != manifest.checksum {
            return Err(EncodeError::ChecksumMismatch { path: bin, expected: manifest.checksum, actual });
        }
        let (d, k) = (manifest.dims, manifest.k);
        let expected = 8 * (d * (k + 1) + k);
        if bytes.len() != expected {
            return Err(EncodeError::DimensionMismatch { expected, actual: bytes.len() });
        }
        let values: Vec<f64> = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk"))).collect();
        Ok(OutputPcaModel {
            mean: values[..d].to_vec(),
            basis: values[d..d * (k + 1)].chunks(d).map(<[f64]>::to_vec).collect(),
            explained_variance: values[d * (k + 1)..].to_vec(),
            variance_keep: manifest.variance_keep,
            k_cap: manifest.k_cap,
            n_points: manifest.n_points,
            normalization: manifest.normalization,
        })
    }
}

pub const PCA_BIN: &str = "pca.bin";
pub const PCA_JSON: &str = "pca.json";

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PcaManifest {
    dims: usize,
    k: usize,
    n_points: usize,
    variance_keep: f64,
    k_cap: usize,
    normalization: [ChannelScale; N_CHANNELS],
    layout: String,
    checksum: String,
}

/// Principal components of the training targets.
///
/// `K` is the smallest count whose cumulative explained variance reaches
/// `variance_keep`, clamped to `[1, k_cap]`. Each basis row is signed so that
/// its largest-magnitude entry is positive.
pub fn fit_output_pca(targets: &[Vec<f64>], variance_keep: f64, k_cap: usize) -> Result<OutputPcaModel, EncodeError> {
    let n = targets.len();
    if n < 2 {
        return Err(EncodeError::TooFewSamples(n));
    }
    let d = targets[0].len();
    if let Some(bad) = targets.iter().find(|t| t.len() != d) {
        return Err(EncodeError::DimensionMismatch { expected: d, actual: bad.len() });
    }
    let mut mean = vec![0.0; d];
    for t in targets {
        for (m, v) in mean.iter_mut().zip(t) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let centered = DMatrix::from_fn(n, d, |i, j| targets[i][j] - mean[j]);
    let svd = centered.svd(false, true);
    let v_t = svd.v_t.expect("right singular vectors requested");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let variances: Vec<f64> = order.iter().map(|&i| svd.singular_values[i].powi(2) / (n - 1) as f64).collect();
    let total: f64 = variances.iter().sum();

    let k_cap = k_cap.max(1);
    let mut k = 1;
    if total > 0.0 {
        let mut cum = 0.0;
        for (i, v) in variances.iter().enumerate() {
            cum += v;
            k = i + 1;
            if cum >= variance_keep * total * (1.0 - 1e-12) {
                break;
            }
        }
    }
    let k = k.min(k_cap).min(order.len());

    let basis: Vec<Vec<f64>> = if total > 0.0 {
        order[..k]
            .iter()
            .map(|&i| {
                let mut row: Vec<f64> = (0..d).map(|j| v_t[(i, j)]).collect();
                let peak = row.iter().copied().fold(0.0f64, |acc, v| if v.abs() > acc.abs() { v } else { acc });
                if peak < 0.0 {
                    row.iter_mut().for_each(|v| *v = -*v);
                }
                row
            })
            .collect()
    } else {
        // no variance at all: any unit vector spans the (empty) residual
        vec![(0..d).map(|j| if j == 0 { 1.0 } else { 0.0 }).collect()]
    };
    Ok(OutputPcaModel {
        mean,
        basis,
        explained_variance: variances[..k].to_vec(),
        variance_keep,
        k_cap,
        n_points: d / N_CHANNELS,
        normalization: CHANNEL_SCALES,
    })
}

/// One training or test unit.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedSample {
    pub trial_id: String,
    pub image: RgbImage,
    /// Output-PCA coefficients (absent for prediction-only samples).
    pub target: Option<Vec<f64>>,
    /// Interlaced normalized waveforms the coefficients were projected from.
    pub waveform: Option<Vec<f64>>,
    pub stance_limb: Limb,
    pub mirrored: bool,
    pub movement_class: MovementClass,
    pub scaling_record: ScalingRecord,
    pub subject: SubjectMeta,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SampleSidecar {
    trial_id: String,
    image_file: String,
    image_size: usize,
    image_sha256: String,
    stance_limb: Limb,
    mirrored: bool,
    movement_class: MovementClass,
    scaling_record: ScalingRecord,
    subject: SubjectMeta,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    target: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    waveform: Option<Vec<f64>>,
}

pub fn png_bytes(image: &RgbImage) -> Vec<u8> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(BufWriter::new(&mut out), image.size as u32, image.size as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header().expect("in-memory png header");
        writer.write_image_data(&image.pixels).expect("in-memory png data");
    }
    out
}

pub fn read_png(path: &Path) -> Result<RgbImage, EncodeError> {
    let fmt = |detail: String| EncodeError::Format { path: path.to_path_buf(), detail };
    let file = fs::File::open(path).map_err(io_err(path))?;
    let mut reader = png::Decoder::new(std::io::BufReader::new(file)).read_info().map_err(|e| fmt(e.to_string()))?;
    let mut buf = vec![0; reader.output_buffer_size()];
    let info = reader.next_frame(&mut buf).map_err(|e| fmt(e.to_string()))?;
    if info.color_type != png::ColorType::Rgb || info.bit_depth != png::BitDepth::Eight || info.width != info.height {
        return Err(fmt("expected a square 8-bit RGB image".into()));
    }
    buf.truncate(info.buffer_size());
    Ok(RgbImage { size: info.width as usize, pixels: buf })
}

impl EncodedSample {
    /// Writes `<trial_id>.png` and `<trial_id>.json` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<(), EncodeError> {
        let png = png_bytes(&self.image);
        let image_file = format!("{}.png", self.trial_id);
        let path = dir.join(&image_file);
        fs::write(&path, &png).map_err(io_err(&path))?;
        let sidecar = SampleSidecar {
            trial_id: self.trial_id.clone(),
            image_sha256: sha256_hex(&png),
            image_file,
            image_size: self.image.size,
            stance_limb: self.stance_limb,
            mirrored: self.mirrored,
            movement_class: self.movement_class,
            scaling_record: self.scaling_record,
            subject: self.subject.clone(),
            target: self.target.clone(),
            waveform: self.waveform.clone(),
        };
        let path = dir.join(format!("{}.json", self.trial_id));
        fs::write(&path, serde_json::to_string(&sidecar).expect("sidecar serializes") + "\n").map_err(io_err(&path))
    }

    pub fn load(dir: &Path, trial_id: &str) -> Result<EncodedSample, EncodeError> {
        let path = dir.join(format!("{trial_id}.json"));
        let text = fs::read_to_string(&path).map_err(io_err(&path))?;
        let s: SampleSidecar = serde_json::from_str(&text).map_err(|e| EncodeError::Format { path: path.clone(), detail: e.to_string() })?;
        let png_path = dir.join(&s.image_file);
        let raw = fs::read(&png_path).map_err(io_err(&png_path))?;
        let actual = sha256_hex(&raw);
        if actual != s.image_sha256 {
            return Err(EncodeError::ChecksumMismatch { path: png_path, expected: s.image_sha256, actual });
        }
        let image = read_png(&png_path)?;
        if image.size != s.image_size {
            return Err(EncodeError::DimensionMismatch { expected: s.image_size, actual: image.size });
        }
        Ok(EncodedSample {
            trial_id: s.trial_id,
            image,
            target: s.target,
            waveform: s.waveform,
            stance_limb: s.stance_limb,
            mirrored: s.mirrored,
            movement_class: s.movement_class,
            scaling_record: s.scaling_record,
            subject: s.subject,
        })
    }
}
