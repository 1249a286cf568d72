//! Stance events, movement templates, stance-phase normalization and
//! sagittal mirroring.

use crate::ingest::lerp_at;
use crate::trial::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum GaitError {
    #[error("no run of at least {min_frames} frames above {threshold_n} N")]
    NoContact { threshold_n: f64, min_frames: usize },
    #[error("force track ends before toe-off")]
    NoToeOff,
    #[error("trial has no {0} track")]
    MissingSensor(SensorLocation),
    #[error("pelvis track holds {0:?}, positions are needed to classify")]
    NoPositionTrack(TrackKind),
    #[error("stance window [{fs}, {to}] out of bounds for a track of {len} frames")]
    WindowOutOfBounds { fs: f64, to: f64, len: usize },
    #[error("trial is not a left-stance trial")]
    NotLeftStance,
    #[error("n_points must be at least 2")]
    TooFewPoints,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ContactParams {
    pub threshold_n: f64,
    pub min_contact_frames: usize,
}

impl Default for ContactParams {
    fn default() -> Self {
        ContactParams { threshold_n: 20.0, min_contact_frames: 10 }
    }
}

/// Foot-strike / toe-off indices at the force rate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StanceWindow {
    pub fs_frame: usize,
    pub to_frame: usize,
    /// Rate the frame indices refer to.
    pub rate_hz: f64,
    pub stance_limb: Option<Limb>,
    pub normalized_len: usize,
}

impl StanceWindow {
    pub fn new(fs_frame: usize, to_frame: usize, rate_hz: f64) -> Self {
        StanceWindow { fs_frame, to_frame, rate_hz, stance_limb: None, normalized_len: 101 }
    }

    pub fn duration_s(&self) -> f64 {
        (self.to_frame - self.fs_frame) as f64 / self.rate_hz
    }

    /// Window bounds as fractional frame positions on a track at `track_hz`.
    pub fn on_track(&self, track_hz: f64) -> (f64, f64) {
        let ratio = track_hz / self.rate_hz;
        (self.fs_frame as f64 * ratio, self.to_frame as f64 * ratio)
    }
}

/// First index of the earliest run of at least `min_len` frames satisfying `pred`,
/// scanning from `from`. A run cut off by the end of the series counts when
/// `allow_truncated` is set.
fn first_run(values: &[f64], from: usize, min_len: usize, allow_truncated: bool, pred: impl Fn(f64) -> bool) -> Option<usize> {
    let mut i = from;
    while i < values.len() {
        if pred(values[i]) {
            let start = i;
            while i < values.len() && pred(values[i]) {
                i += 1;
            }
            if i - start >= min_len || (allow_truncated && i == values.len()) {
                return Some(start);
            }
        } else {
            i += 1;
        }
    }
    None
}

/// FS is the first frame of the earliest run with `Fz > threshold` lasting at
/// least `min_contact_frames`; TO is the first frame of the next run with
/// `Fz <= threshold` of the same minimum length (or reaching the track end).
pub fn detect_stance_events(force: &ForceTrack, params: &ContactParams) -> Result<StanceWindow, GaitError> {
    let fz: Vec<f64> = force.vertical().collect();
    let thr = params.threshold_n;
    let min = params.min_contact_frames.max(1);
    let fs = first_run(&fz, 0, min, false, |v| v > thr).ok_or(GaitError::NoContact {
        threshold_n: thr,
        min_frames: min,
    })?;
    let to = first_run(&fz, fs, min, true, |v| v <= thr).ok_or(GaitError::NoToeOff)?;
    Ok(StanceWindow::new(fs, to, force.rate_hz))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LimbDetection {
    pub limb: Limb,
    /// Both shanks carried exactly the same energy; `Right` was chosen.
    pub tie: bool,
    pub left_energy: f64,
    pub right_energy: f64,
}

fn stance_energy(track: &SensorTrack, window: &StanceWindow) -> f64 {
    let (fs, to) = window.on_track(track.rate_hz);
    let last = track.len().saturating_sub(1);
    let start = (fs.floor() as usize).min(last);
    let end = (to.ceil() as usize).min(last);
    track.samples[start..=end].iter().map(|s| s.iter().map(|v| v * v).sum::<f64>()).sum()
}

/// Stance limb = side whose shank carries more acceleration energy over the
/// stance window. Ties resolve to `Right`.
pub fn detect_stance_limb(trial: &TrialRecord, window: &StanceWindow) -> Result<LimbDetection, GaitError> {
    let left = trial.sensor(SensorLocation::LShank).ok_or(GaitError::MissingSensor(SensorLocation::LShank))?;
    let right = trial.sensor(SensorLocation::RShank).ok_or(GaitError::MissingSensor(SensorLocation::RShank))?;
    let left_energy = stance_energy(left, window);
    let right_energy = stance_energy(right, window);
    let limb = if left_energy > right_energy { Limb::Left } else { Limb::Right };
    Ok(LimbDetection { limb, tie: left_energy == right_energy, left_energy, right_energy })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifyParams {
    pub running_threshold_mps: f64,
    pub sidestep_angle_deg: f64,
    /// Speed change per stance duration above which a run is accelerating or decelerating.
    pub trend_threshold_mps: f64,
    /// When set, speeds between bins are labelled `Other` instead of snapping.
    pub strict_bins: bool,
}

impl Default for ClassifyParams {
    fn default() -> Self {
        ClassifyParams {
            running_threshold_mps: 2.16,
            sidestep_angle_deg: 30.0,
            trend_threshold_mps: 0.5,
            strict_bins: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MovementLabel {
    pub class: MovementClass,
    /// `RunAccel` or `RunDecel` when the speed trend crosses the threshold.
    pub trend: Option<MovementClass>,
    pub mean_speed_mps: f64,
    pub heading_change_deg: f64,
}

impl MovementLabel {
    fn from_manifest(class: MovementClass) -> Self {
        MovementLabel { class, trend: None, mean_speed_mps: f64::NAN, heading_change_deg: f64::NAN }
    }
}

fn speed_bin(speed: f64, strict: bool) -> MovementClass {
    if strict {
        match speed {
            s if (2.0..3.0).contains(&s) => MovementClass::RunSlow,
            s if (4.0..5.0).contains(&s) => MovementClass::RunModerate,
            s if s > 6.0 => MovementClass::RunFast,
            _ => MovementClass::Other,
        }
    } else {
        match speed {
            s if s < 3.5 => MovementClass::RunSlow,
            s if s < 5.5 => MovementClass::RunModerate,
            _ => MovementClass::RunFast,
        }
    }
}

fn mean_xy(v: &[[f64; 2]]) -> [f64; 2] {
    let n = v.len().max(1) as f64;
    let sum = v.iter().fold([0.0, 0.0], |acc, p| [acc[0] + p[0], acc[1] + p[1]]);
    [sum[0] / n, sum[1] / n]
}

/// Labels a trial from the horizontal motion of its pelvis marker.
///
/// Accelerometer trials carry no recoverable speed, so their manifest label is
/// returned unchanged (`Other` when absent).
pub fn classify_movement(
    trial: &TrialRecord,
    window: Option<&StanceWindow>,
    params: &ClassifyParams,
) -> Result<MovementLabel, GaitError> {
    if trial.source_kind == SourceKind::Accelerometers {
        return Ok(MovementLabel::from_manifest(trial.movement_label.unwrap_or(MovementClass::Other)));
    }
    let pelvis = trial.sensor(SensorLocation::Pelvis).ok_or(GaitError::MissingSensor(SensorLocation::Pelvis))?;
    if pelvis.kind != TrackKind::Position {
        return Err(GaitError::NoPositionTrack(pelvis.kind));
    }
    let p = &pelvis.samples;
    if p.len() < 3 {
        return Err(GaitError::WindowOutOfBounds { fs: 0.0, to: 0.0, len: p.len() });
    }
    let h = 1.0 / pelvis.rate_hz;
    let vel: Vec<[f64; 2]> = (1..p.len() - 1)
        .map(|i| [(p[i + 1][0] - p[i - 1][0]) / (2.0 * h), (p[i + 1][1] - p[i - 1][1]) / (2.0 * h)])
        .collect();
    let speeds: Vec<f64> = vel.iter().map(|v| v[0].hypot(v[1])).collect();
    let mean_speed = speeds.iter().sum::<f64>() / speeds.len() as f64;

    // velocity frame k sits at track frame k + 1
    let n = vel.len();
    let (pre_end, post_start) = match window {
        Some(w) => {
            let (fs, to) = w.on_track(pelvis.rate_hz);
            ((fs.floor() as usize).saturating_sub(1).min(n), (to.ceil() as usize).saturating_sub(1).min(n))
        }
        None => (n * 3 / 10, n - n * 3 / 10),
    };
    let pre = mean_xy(&vel[..pre_end.max(1).min(n)]);
    let post = mean_xy(&vel[post_start.min(n - 1)..]);
    let heading = (pre[0] * post[1] - pre[1] * post[0]).atan2(pre[0] * post[0] + pre[1] * post[1]).to_degrees();

    let mut label = MovementLabel { class: MovementClass::Other, trend: None, mean_speed_mps: mean_speed, heading_change_deg: heading };
    if mean_speed < params.running_threshold_mps {
        return Ok(label);
    }
    if heading.abs() > params.sidestep_angle_deg {
        // positive heading change is a left turn; cutting toward the stance side is a crossover
        let crossover = match trial.stance_limb.or(window.and_then(|w| w.stance_limb)) {
            Some(Limb::Right) => heading < 0.0,
            Some(Limb::Left) => heading > 0.0,
            None => false,
        };
        label.class = if crossover { MovementClass::Other } else { MovementClass::Sidestep };
        return Ok(label);
    }
    label.class = speed_bin(mean_speed, params.strict_bins);
    if label.class != MovementClass::Other {
        // least-squares slope of speed over time
        let t_mean = (n - 1) as f64 * h / 2.0;
        let (mut num, mut den) = (0.0, 0.0);
        for (k, s) in speeds.iter().enumerate() {
            let dt = k as f64 * h - t_mean;
            num += dt * (s - mean_speed);
            den += dt * dt;
        }
        let slope = if den > 0.0 { num / den } else { 0.0 };
        let stance_s = window.map(StanceWindow::duration_s).unwrap_or(0.25);
        let change = slope * stance_s;
        if change > params.trend_threshold_mps {
            label.trend = Some(MovementClass::RunAccel);
        } else if change < -params.trend_threshold_mps {
            label.trend = Some(MovementClass::RunDecel);
        }
    }
    Ok(label)
}

/// Resamples the stance span of a uniform series onto `n_points` equally spaced
/// points. The first output is the value at FS, the last the value at TO.
pub fn normalize_stance<const N: usize>(
    samples: &[[f64; N]],
    track_hz: f64,
    window: &StanceWindow,
    n_points: usize,
) -> Result<Vec<[f64; N]>, GaitError> {
    if n_points < 2 {
        return Err(GaitError::TooFewPoints);
    }
    let (fs, to) = window.on_track(track_hz);
    let len = samples.len();
    if len == 0 || fs < 0.0 || to <= fs || to > (len - 1) as f64 + 1e-9 {
        return Err(GaitError::WindowOutOfBounds { fs, to, len });
    }
    let to = to.min((len - 1) as f64);
    let span = to - fs;
    let last = n_points - 1;
    Ok((0..n_points)
        .map(|j| {
            let pos = if j == last { to } else { fs + span * j as f64 / last as f64 };
            lerp_at(samples, pos)
        })
        .collect())
}

/// Span `[FS - lead_fraction * (TO - FS), TO]` in window frames, floored and
/// clamped at zero.
pub fn lead_in_span(window: &StanceWindow, lead_fraction: f64) -> (usize, usize) {
    let stance = (window.to_frame - window.fs_frame) as f64;
    let start = (window.fs_frame as f64 - lead_fraction.max(0.0) * stance).floor().max(0.0) as usize;
    (start, window.to_frame)
}

/// Keeps the lead-in plus stance portion of a track sampled at `track_hz`.
pub fn trim_lead_in<T: Clone>(samples: &[T], track_hz: f64, window: &StanceWindow, lead_fraction: f64) -> Vec<T> {
    if samples.is_empty() {
        return Vec::new();
    }
    let (start, end) = lead_in_span(window, lead_fraction);
    let ratio = track_hz / window.rate_hz;
    let last = samples.len() - 1;
    let start = ((start as f64 * ratio).floor() as usize).min(last);
    let end = ((end as f64 * ratio).ceil() as usize).min(last);
    samples[start..=end].to_vec()
}

/// Reflection of one force-plate frame across the sagittal plane. Moments are
/// pseudovectors, so only `Mx` keeps its sign.
pub fn mirror_force_frame(f: Vec6) -> Vec6 {
    [-f[0], f[1], f[2], f[3], -f[4], -f[5]]
}

/// Reflects a left-stance trial onto the right limb. A trial that was already
/// mirrored can be reflected back, which makes this an involution.
pub fn mirror_left_to_right(trial: &TrialRecord) -> Result<TrialRecord, GaitError> {
    let limb = trial.stance_limb.ok_or(GaitError::NotLeftStance)?;
    if limb != Limb::Left && !trial.mirrored {
        return Err(GaitError::NotLeftStance);
    }
    Ok(reflect_sagittal(trial))
}

pub(crate) fn reflect_sagittal(trial: &TrialRecord) -> TrialRecord {
    let mut out = trial.clone();
    for track in &mut out.sensors {
        track.location = track.location.mirrored();
        if track.kind != TrackKind::Magnitude {
            for s in &mut track.samples {
                s[0] = -s[0];
            }
        }
    }
    out.sort_sensors();
    if let Some(force) = &mut out.force {
        for c in &mut force.channels {
            *c = mirror_force_frame(*c);
        }
    }
    out.stance_limb = trial.stance_limb.map(Limb::opposite);
    if let Some(oracle) = &mut out.oracle {
        oracle.stance_limb = oracle.stance_limb.opposite();
    }
    out.mirrored = !trial.mirrored;
    out
}
