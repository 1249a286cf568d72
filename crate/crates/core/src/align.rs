//! Re-orientation of independent accelerometer frames.
//!
//! Two modes: collapse each frame to its Euclidean magnitude, or rotate the
//! track onto its principal axes (PC1 anterior, PC2 lateral, PC3 vertical).

use crate::trial::*;
use log::warn;
use nalgebra::{DMatrix, Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use std::fmt;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum AlignError {
    #[error("total variance {0:e} is below 1e-12")]
    DegenerateVariance(f64),
    #[error("need at least 3 frames, got {0}")]
    TooShort(usize),
    #[error("{0} track holds positions, accelerations are required")]
    NotAcceleration(SensorLocation),
    #[error("matrix is not a proper rotation")]
    NotRotation,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AlignmentMode {
    Norm,
    #[default]
    Pca,
}

impl AlignmentMode {
    pub fn as_str(self) -> &'static str {
        match self {
            AlignmentMode::Norm => "norm",
            AlignmentMode::Pca => "pca",
        }
    }
}

impl fmt::Display for AlignmentMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Proper rotation: orthonormal with determinant +1 (both within 1e-9).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RotationMatrix3(Matrix3<f64>);

const ROTATION_TOL: f64 = 1e-9;

impl RotationMatrix3 {
    pub fn identity() -> Self {
        RotationMatrix3(Matrix3::identity())
    }

    pub fn new(m: Matrix3<f64>) -> Result<Self, AlignError> {
        let r = RotationMatrix3(m);
        if r.orthonormality_error() <= ROTATION_TOL && (m.determinant() - 1.0).abs() <= ROTATION_TOL {
            Ok(r)
        } else {
            Err(AlignError::NotRotation)
        }
    }

    pub fn from_rows(rows: [[f64; 3]; 3]) -> Result<Self, AlignError> {
        Self::new(Matrix3::from_fn(|i, j| rows[i][j]))
    }

    pub fn rows(&self) -> [[f64; 3]; 3] {
        let m = &self.0;
        [[m[(0, 0)], m[(0, 1)], m[(0, 2)]], [m[(1, 0)], m[(1, 1)], m[(1, 2)]], [m[(2, 0)], m[(2, 1)], m[(2, 2)]]]
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }

    /// max |RᵀR − I|
    pub fn orthonormality_error(&self) -> f64 {
        (self.0.transpose() * self.0 - Matrix3::identity()).abs().max()
    }

    pub fn determinant(&self) -> f64 {
        self.0.determinant()
    }

    pub fn apply(&self, v: Vec3) -> Vec3 {
        let r = self.0 * Vector3::new(v[0], v[1], v[2]);
        [r[0], r[1], r[2]]
    }

    pub fn transpose(&self) -> Self {
        RotationMatrix3(self.0.transpose())
    }

    pub fn compose(&self, other: &RotationMatrix3) -> Self {
        RotationMatrix3(self.0 * other.0)
    }

    /// Rotation from a (not necessarily normalized) quaternion `w + xi + yj + zk`.
    pub fn from_quaternion(w: f64, x: f64, y: f64, z: f64) -> Self {
        let n = (w * w + x * x + y * y + z * z).sqrt();
        let (w, x, y, z) = (w / n, x / n, y / n, z / n);
        RotationMatrix3(Matrix3::new(
            1.0 - 2.0 * (y * y + z * z),
            2.0 * (x * y - w * z),
            2.0 * (x * z + w * y),
            2.0 * (x * y + w * z),
            1.0 - 2.0 * (x * x + z * z),
            2.0 * (y * z - w * x),
            2.0 * (x * z - w * y),
            2.0 * (y * z + w * x),
            1.0 - 2.0 * (x * x + y * y),
        ))
    }
}

impl Serialize for RotationMatrix3 {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        self.rows().serialize(s)
    }
}

impl<'de> Deserialize<'de> for RotationMatrix3 {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let rows = <[[f64; 3]; 3]>::deserialize(d)?;
        RotationMatrix3::from_rows(rows).map_err(serde::de::Error::custom)
    }
}

/// Replaces every frame by `(m, m, m)` with `m` its Euclidean norm. Tracks that
/// already hold magnitudes are returned unchanged.
pub fn euclidean_norm_align(track: &SensorTrack) -> SensorTrack {
    if track.kind == TrackKind::Magnitude {
        return track.clone();
    }
    let samples = track
        .samples
        .iter()
        .map(|s| {
            let m = (s[0] * s[0] + s[1] * s[1] + s[2] * s[2]).sqrt();
            [m, m, m]
        })
        .collect();
    SensorTrack { samples, kind: TrackKind::Magnitude, ..track.clone() }
}

/// Principal-axis rotation of an acceleration track.
///
/// Rows of the returned matrix are (PC2, PC1, PC3), so the rotated frame puts
/// the dominant direction on the anterior axis. Sign conventions:
/// - PC1 points so that the net velocity change along it (integral of the
///   rotated anterior component) is non-negative;
/// - PC3 points so that the mean rotated vertical component is non-negative,
///   i.e. along the gravity reaction an accelerometer reports;
/// - PC2 completes a right-handed frame.
///
/// When the vertical mean vanishes the SVD sign of PC2 is kept and PC3 is
/// flipped as needed for det = +1.
pub fn pca_rotation_matrix(track: &SensorTrack) -> Result<RotationMatrix3, AlignError> {
    let n = track.samples.len();
    if n < 3 {
        return Err(AlignError::TooShort(n));
    }
    let mut mean = [0.0; 3];
    for s in &track.samples {
        for k in 0..3 {
            mean[k] += s[k];
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let centered = DMatrix::from_fn(n, 3, |i, k| track.samples[i][k] - mean[k]);
    let total_var = centered.iter().map(|v| v * v).sum::<f64>() / n as f64;
    if !(total_var >= 1e-12) {
        return Err(AlignError::DegenerateVariance(total_var));
    }
    let svd = centered.svd(false, true);
    let v_t = svd.v_t.expect("right singular vectors requested");
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let axis = |k: usize| Vector3::new(v_t[(order[k], 0)], v_t[(order[k], 1)], v_t[(order[k], 2)]).normalize();

    let mut pc1 = axis(0);
    let mut pc2 = axis(1);
    let mut pc3 = axis(2);

    let dt = 1.0 / track.rate_hz;
    let project = |axis: &Vector3<f64>, s: &Vec3| axis[0] * s[0] + axis[1] * s[1] + axis[2] * s[2];
    // trapezoidal integral of the anterior component
    let ant: Vec<f64> = track.samples.iter().map(|s| project(&pc1, s)).collect();
    let dv = dt * (ant.iter().sum::<f64>() - 0.5 * (ant[0] + ant[n - 1]));
    if dv < 0.0 {
        pc1 = -pc1;
    }
    let vertical_mean = project(&pc3, &mean);
    let gravity_scale = mean.iter().map(|m| m.abs()).fold(0.0, f64::max);
    if vertical_mean.abs() > 1e-6 * gravity_scale.max(1.0) {
        if vertical_mean < 0.0 {
            pc3 = -pc3;
        }
        pc2 = pc1.cross(&pc3);
    } else if pc2.cross(&pc1).dot(&pc3) < 0.0 {
        pc3 = -pc3;
    }
    let m = Matrix3::from_rows(&[pc2.transpose(), pc1.transpose(), pc3.transpose()]);
    RotationMatrix3::new(m)
}

pub fn rotate_track(track: &SensorTrack, r: &RotationMatrix3) -> SensorTrack {
    SensorTrack { samples: track.samples.iter().map(|s| r.apply(*s)).collect(), ..track.clone() }
}

/// Rotation applied to one sensor during [`align_trial`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AppliedRotation {
    pub location: SensorLocation,
    pub rotation: RotationMatrix3,
    /// Identity used because the source track had no usable variance.
    pub fallback: bool,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct AlignmentLog {
    pub rotations: Vec<AppliedRotation>,
    pub warnings: Vec<String>,
}

fn rotation_or_identity(track: &SensorTrack, trial_id: &str, log: &mut AlignmentLog) -> (RotationMatrix3, bool) {
    match pca_rotation_matrix(track) {
        Ok(r) => (r, false),
        Err(e) => {
            let msg = format!("{trial_id}/{}: {e}; using identity rotation", track.location);
            warn!("{msg}");
            log.warnings.push(msg);
            (RotationMatrix3::identity(), true)
        }
    }
}

/// Aligns every sensor of an acceleration trial.
///
/// PCA mode uses one rotation, computed at the pelvis, for marker-derived
/// trials (their markers share the laboratory frame) and one rotation per
/// sensor for accelerometer trials.
pub fn align_trial(trial: &TrialRecord, mode: AlignmentMode) -> Result<(TrialRecord, AlignmentLog), AlignError> {
    if let Some(s) = trial.sensors.iter().find(|s| s.kind == TrackKind::Position) {
        return Err(AlignError::NotAcceleration(s.location));
    }
    let mut out = trial.clone();
    let mut log = AlignmentLog::default();
    match mode {
        AlignmentMode::Norm => {
            for s in &mut out.sensors {
                *s = euclidean_norm_align(s);
            }
        }
        AlignmentMode::Pca => {
            let shared = match trial.source_kind {
                SourceKind::Markers => {
                    let pelvis = trial.sensor(SensorLocation::Pelvis).unwrap_or(&trial.sensors[0]);
                    Some(rotation_or_identity(pelvis, &trial.trial_id, &mut log))
                }
                SourceKind::Accelerometers => None,
            };
            for s in &mut out.sensors {
                if s.kind == TrackKind::Magnitude {
                    continue;
                }
                let (r, fallback) = match shared {
                    Some(pair) => pair,
                    None => rotation_or_identity(s, &trial.trial_id, &mut log),
                };
                *s = rotate_track(s, &r);
                log.rotations.push(AppliedRotation { location: s.location, rotation: r, fallback });
            }
        }
    }
    Ok((out, log))
}
