//! Virtual accelerometers from marker trajectories and the synthetic trial
//! generator used as ground truth.
//!
//! Every generated trial is a right-stance template reflected across the
//! sagittal plane for left-stance trials. Sensor signals are built from
//! closed-form specific forces (lab frame, z up, gravity included):
//!
//! - a shared pelvis path (speed change, optional heading change),
//! - windowed sinusoidal segment oscillations that start and end at rest,
//! - a force-coupled term on the pelvis and stance-limb segments,
//! - an impact transient on the stance shank.
//!
//! Marker trajectories are the exact discrete double integral of the sampled
//! kinematic acceleration, so differentiating them reproduces the
//! accelerometer signal up to rounding.

use crate::align::RotationMatrix3;
use crate::gait::{mirror_force_frame, reflect_sagittal};
use crate::ingest::{resample_uniform, write_trial, IngestError, ResampleError};
use crate::trial::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("track has {0} frames, at least 3 are needed")]
    TrackTooShort(usize),
    #[error("track holds {0:?}, positions are required")]
    NotPositions(TrackKind),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("invalid synthesis spec: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Resample(#[from] ResampleError),
    #[error("duplicate trial id {0}")]
    DuplicateTrialId(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Ingest(#[from] IngestError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VirtualImuConfig {
    pub output_hz: f64,
    pub include_gravity: bool,
    pub lowpass_cutoff_hz: Option<f64>,
}

impl Default for VirtualImuConfig {
    fn default() -> Self {
        VirtualImuConfig { output_hz: 250.0, include_gravity: true, lowpass_cutoff_hz: None }
    }
}

impl VirtualImuConfig {
    pub fn validate(&self, source_hz: f64) -> Result<(), SimError> {
        if !(self.output_hz.is_finite() && self.output_hz > 0.0) {
            return Err(SimError::InvalidConfig(format!("output_hz must be positive, got {}", self.output_hz)));
        }
        if self.output_hz > source_hz {
            return Err(SimError::InvalidConfig(format!(
                "output_hz {} exceeds the marker rate {source_hz}",
                self.output_hz
            )));
        }
        if let Some(fc) = self.lowpass_cutoff_hz {
            if !(fc > 0.0 && fc < self.output_hz / 2.0) {
                return Err(SimError::InvalidConfig(format!(
                    "lowpass_cutoff_hz {fc} must lie in (0, {})",
                    self.output_hz / 2.0
                )));
            }
        }
        Ok(())
    }
}

/// Second-order Butterworth low-pass run forwards and backwards (zero lag).
/// The ends are padded with an odd reflection to limit transients.
pub fn filtfilt_lowpass(x: &[f64], rate_hz: f64, cutoff_hz: f64) -> Vec<f64> {
    let n = x.len();
    if n < 2 {
        return x.to_vec();
    }
    let k = (PI * cutoff_hz / rate_hz).tan();
    let norm = 1.0 / (1.0 + std::f64::consts::SQRT_2 * k + k * k);
    let b0 = k * k * norm;
    let (b1, b2) = (2.0 * b0, b0);
    let a1 = 2.0 * (k * k - 1.0) * norm;
    let a2 = (1.0 - std::f64::consts::SQRT_2 * k + k * k) * norm;

    let pad = (n - 1).min(12);
    let mut ext = Vec::with_capacity(n + 2 * pad);
    ext.extend((1..=pad).rev().map(|i| 2.0 * x[0] - x[i]));
    ext.extend_from_slice(x);
    ext.extend((1..=pad).map(|i| 2.0 * x[n - 1] - x[n - 1 - i]));

    let run = |v: &mut Vec<f64>| {
        // transposed direct form II, started in steady state for the first value
        let c = v[0];
        let mut z2 = (b2 - a2) * c;
        let mut z1 = (b1 - a1) * c + z2;
        for s in v.iter_mut() {
            let xin = *s;
            let y = b0 * xin + z1;
            z1 = b1 * xin - a1 * y + z2;
            z2 = b2 * xin - a2 * y;
            *s = y;
        }
    };
    run(&mut ext);
    ext.reverse();
    run(&mut ext);
    ext.reverse();
    ext[pad..pad + n].to_vec()
}

/// Accelerations of a marker track.
///
/// Interior frames use the central difference `(p[i+1] + p[i-1] - 2 p[i]) / h²`,
/// end frames the one-sided stencil `(2 p0 - 5 p1 + 4 p2 - p3) / h²`. With
/// gravity enabled, 9.81 m/s² is added to z so the output follows the
/// accelerometer convention. The result is resampled to `cfg.output_hz`.
pub fn double_differentiate(track: &SensorTrack, cfg: &VirtualImuConfig) -> Result<SensorTrack, SimError> {
    if track.kind != TrackKind::Position {
        return Err(SimError::NotPositions(track.kind));
    }
    let n = track.len();
    if n < 3 {
        return Err(SimError::TrackTooShort(n));
    }
    cfg.validate(track.rate_hz)?;

    let filtered;
    let p: &[Vec3] = match cfg.lowpass_cutoff_hz {
        Some(fc) => {
            let cols: Vec<Vec<f64>> = (0..3)
                .map(|k| filtfilt_lowpass(&track.samples.iter().map(|s| s[k]).collect::<Vec<_>>(), track.rate_hz, fc))
                .collect();
            filtered = (0..n).map(|i| [cols[0][i], cols[1][i], cols[2][i]]).collect::<Vec<Vec3>>();
            &filtered
        }
        None => &track.samples,
    };

    let h2 = (1.0 / track.rate_hz).powi(2);
    let mut acc = vec![[0.0; 3]; n];
    for i in 1..n - 1 {
        for k in 0..3 {
            acc[i][k] = ((p[i + 1][k] + p[i - 1][k]) - 2.0 * p[i][k]) / h2;
        }
    }
    if n == 3 {
        acc[0] = acc[1];
        acc[2] = acc[1];
    } else {
        // 2 p0 - 5 p1 + 4 p2 - p3 written as 2 D1 - D2 of the central differences
        for k in 0..3 {
            acc[0][k] = 2.0 * acc[1][k] - acc[2][k];
            acc[n - 1][k] = 2.0 * acc[n - 2][k] - acc[n - 3][k];
        }
    }
    if cfg.include_gravity {
        for a in &mut acc {
            a[2] += GRAVITY;
        }
    }
    let out = SensorTrack::new(track.location, track.rate_hz, TrackKind::Acceleration, acc);
    Ok(resample_uniform(&out, cfg.output_hz)?)
}

/// Replaces every marker track of a trial by its virtual accelerometer.
pub fn virtual_imu_trial(trial: &TrialRecord, cfg: &VirtualImuConfig) -> Result<TrialRecord, SimError> {
    let mut out = trial.clone();
    for s in &mut out.sensors {
        *s = double_differentiate(s, cfg)?;
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Synthetic trials

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LimbPolicy {
    Right,
    Left,
    /// Even indices right, odd indices left.
    #[default]
    Alternate,
}

impl LimbPolicy {
    fn limb_for(self, index: usize) -> Limb {
        match self {
            LimbPolicy::Right => Limb::Right,
            LimbPolicy::Left => Limb::Left,
            LimbPolicy::Alternate if index % 2 == 0 => Limb::Right,
            LimbPolicy::Alternate => Limb::Left,
        }
    }
}

/// Orientation of each sensor relative to the lab frame.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MountRotation {
    #[default]
    Identity,
    /// Independent uniformly distributed rotation per sensor and trial.
    Random,
    /// One rotation per sensor, in canonical sensor order.
    Fixed(Vec<RotationMatrix3>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub seed: u64,
    pub n_trials: usize,
    pub movement: MovementClass,
    pub speed_mps: f64,
    pub stance_ms: f64,
    pub noise_std_mps2: f64,
    pub mount_rotation: MountRotation,
    pub source_kind: SourceKind,
    pub stance_limb: LimbPolicy,
    /// Half-width of the uniform jitter applied to `speed_mps`.
    pub speed_jitter_mps: f64,
    /// Half-width of the uniform jitter applied to `stance_ms`.
    pub stance_jitter_ms: f64,
    pub marker_hz: f64,
    pub sensor_hz: f64,
    pub force_hz: f64,
    /// Defaults to `<movement>-<seed>-`.
    pub id_prefix: Option<String>,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            seed: 0,
            n_trials: 1,
            movement: MovementClass::RunModerate,
            speed_mps: 4.0,
            stance_ms: 250.0,
            noise_std_mps2: 0.0,
            mount_rotation: MountRotation::Identity,
            source_kind: SourceKind::Markers,
            stance_limb: LimbPolicy::Alternate,
            speed_jitter_mps: 0.0,
            stance_jitter_ms: 0.0,
            marker_hz: 250.0,
            sensor_hz: 1000.0,
            force_hz: 2000.0,
            id_prefix: None,
        }
    }
}

const RUN_THRESHOLD_MPS: f64 = 2.16;
const LEAD_S: f64 = 0.5;
// equal lead and tail keep every trial symmetric about mid-stance
const TAIL_S: f64 = LEAD_S;

impl SynthSpec {
    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |msg: String| Err(SimError::InvalidSpec(msg));
        if self.n_trials == 0 {
            return bad("n_trials must be positive".into());
        }
        if !(self.stance_ms > 0.0) || self.stance_jitter_ms < 0.0 || self.stance_ms - self.stance_jitter_ms < 50.0 {
            return bad(format!("stance_ms {} ± {} must stay above 50 ms", self.stance_ms, self.stance_jitter_ms));
        }
        if self.stance_ms + self.stance_jitter_ms > 1000.0 {
            return bad("stance longer than 1 s".into());
        }
        if !(self.noise_std_mps2 >= 0.0) {
            return bad("noise_std_mps2 must be non-negative".into());
        }
        if !(self.speed_jitter_mps >= 0.0) {
            return bad("speed_jitter_mps must be non-negative".into());
        }
        for (name, hz) in [("marker_hz", self.marker_hz), ("sensor_hz", self.sensor_hz), ("force_hz", self.force_hz)] {
            if !(hz.is_finite() && hz >= 50.0) {
                return bad(format!("{name} must be at least 50 Hz"));
            }
        }
        if let MountRotation::Fixed(r) = &self.mount_rotation {
            if r.len() != 5 {
                return bad(format!("fixed mount_rotation needs 5 matrices, got {}", r.len()));
            }
        }
        let (lo, hi) = (self.speed_mps - self.speed_jitter_mps, self.speed_mps + self.speed_jitter_mps);
        let band = match self.movement {
            MovementClass::RunSlow => (RUN_THRESHOLD_MPS, 3.5),
            MovementClass::RunModerate => (3.5, 5.5),
            MovementClass::RunFast => (5.5, 10.0),
            MovementClass::RunAccel | MovementClass::RunDecel => (RUN_THRESHOLD_MPS + 1.5, 10.0),
            MovementClass::Sidestep => (RUN_THRESHOLD_MPS, 7.0),
            MovementClass::Other => return bad("movement must be a run template or sidestep".into()),
        };
        if !(band.0..=band.1).contains(&self.speed_mps) {
            return bad(format!("speed {} m/s outside the {} band [{}, {}]", self.speed_mps, self.movement.as_str(), band.0, band.1));
        }
        if lo < RUN_THRESHOLD_MPS || hi > 10.0 {
            return bad(format!("jittered speed range [{lo}, {hi}] leaves [{RUN_THRESHOLD_MPS}, 10]"));
        }
        Ok(())
    }

    pub fn prefix(&self) -> String {
        self.id_prefix.clone().unwrap_or_else(|| format!("{}-{}-", self.movement.as_str(), self.seed))
    }

    pub fn trial_id(&self, index: usize) -> String {
        format!("{}{index:04}", self.prefix())
    }
}

fn smoothstep(x: f64) -> (f64, f64, f64) {
    if x <= 0.0 {
        (0.0, 0.0, 0.0)
    } else if x >= 1.0 {
        (1.0, 0.0, 0.0)
    } else {
        let s = x * x * x * (10.0 - 15.0 * x + 6.0 * x * x);
        let d1 = 30.0 * x * x * (1.0 - x) * (1.0 - x);
        let d2 = 60.0 * x * (1.0 - x) * (1.0 - 2.0 * x);
        (s, d1, d2)
    }
}

/// Closed-form force family on normalized stance time `u` in `[0, 1)`, in
/// body weights (forces) and body weight · height (moments).
#[derive(Debug, Clone, Copy)]
struct ForceShape {
    impact: (f64, f64, f64),
    active: (f64, f64, f64),
    brake: f64,
    propel: f64,
    lateral: f64,
    cop_y0: f64,
    cop_dy: f64,
    cop_x: f64,
    free: f64,
}

impl ForceShape {
    fn eval(&self, u: f64) -> Vec6 {
        if !(0.0..1.0).contains(&u) {
            return [0.0; 6];
        }
        let gauss = |(a, mu, sd): (f64, f64, f64)| a * (-(u - mu) * (u - mu) / (2.0 * sd * sd)).exp();
        let fz = 0.1 + gauss(self.impact) + gauss(self.active);
        let s2 = (2.0 * PI * u).sin();
        let fy = if u < 0.5 { -self.brake * s2 } else { -self.propel * s2 };
        let fx = -self.lateral * (PI * u).sin();
        let cy = self.cop_y0 + self.cop_dy * u;
        let cx = self.cop_x;
        let mx = cy * fz;
        let my = -cx * fz;
        let mz = cx * fy - cy * fx + self.free * (PI * u).sin();
        [fx, fy, fz, mx, my, mz]
    }
}

/// All randomly drawn parameters of one right-stance trial.
#[derive(Debug, Clone)]
struct Motion {
    mass: f64,
    height: f64,
    speed: f64,
    fs_t: f64,
    stance_s: f64,
    duration: f64,
    dv: f64,
    dv_tau: f64,
    trend: f64,
    turn: f64,
    turn_tau: f64,
    omega: f64,
    amp: [[f64; 3]; 5],
    burst_amp: f64,
    impact_amp: f64,
    shape: ForceShape,
}

/// Force-coupling gains per location for the right-stance template.
const COUPLING: [[f64; 3]; 5] = [
    [0.4, 0.4, 0.0],
    [0.0, 0.0, 0.0],
    [0.4, 0.4, 0.15],
    [0.0, 0.0, 0.0],
    [0.6, 0.6, 0.25],
];
/// Oscillation acceleration amplitudes (lateral, anterior, vertical) in m/s².
/// Vertical content comes from the force coupling only, which keeps the
/// vertical axis the least energetic one.
const OSC_AMP: [[f64; 3]; 5] = [
    [5.0, 15.0, 0.0],
    [6.0, 16.0, 0.0],
    [6.0, 16.0, 0.0],
    [10.0, 25.0, 0.0],
    [10.0, 25.0, 0.0],
];
/// Oscillation frequency (multiple of the stride frequency) and phase for the
/// lateral and anterior axes. Anterior terms are odd about mid-stance and
/// lateral terms even, so the axes stay uncorrelated and the principal axes
/// match the lab axes.
const OSC_SHAPE: [[(f64, f64); 2]; 5] = [
    [(1.0, PI / 2.0), (2.0, 0.0)],
    [(1.0, PI / 2.0), (1.0, PI)],
    [(1.0, PI / 2.0), (1.0, 0.0)],
    [(1.0, PI / 2.0), (1.0, PI)],
    [(1.0, PI / 2.0), (1.0, 0.0)],
];
/// Relative amplitude of the stance-only vibration on the stance thigh and shank.
const BURST_GAIN: [f64; 5] = [0.0, 0.0, 0.5, 0.0, 1.0];
const BURST_HZ: f64 = 18.0;
const WINDOW_START_S: f64 = 0.02;
const WINDOW_RAMP_S: f64 = 0.15;

impl Motion {
    fn draw(spec: &SynthSpec, rng: &mut ChaCha8Rng) -> Motion {
        let mut sym = || rng.random_range(-1.0..1.0);
        let mass = 77.5 + 17.5 * sym();
        let height = 1.8 + 0.15 * sym();
        let speed = spec.speed_mps + spec.speed_jitter_mps * sym();
        let stance_raw = (spec.stance_ms + spec.stance_jitter_ms * sym()) / 1000.0;
        let style = [sym(), sym(), sym(), sym(), sym(), sym()];
        let jitter: Vec<f64> = (0..5).map(|_| 1.0 + 0.1 * sym()).collect();
        let burst_draw = sym();
        let stride_hz = 1.45 + 0.15 * sym();
        let b_draw = [sym(), sym()];
        let lat_draw = sym();
        let impact_draw = sym();

        let force_frames = (stance_raw * spec.force_hz).round().max(2.0);
        let stance_s = force_frames / spec.force_hz;
        let fs_t = (LEAD_S * spec.force_hz).round() / spec.force_hz;
        let duration_raw = fs_t + stance_s + TAIL_S;
        let duration = (duration_raw * spec.marker_hz).ceil() / spec.marker_hz;

        let sidestep = spec.movement == MovementClass::Sidestep;
        let (dv, trend, turn) = match spec.movement {
            MovementClass::Sidestep => (-0.2, 0.0, (40.0 + 4.0 * style[0]).to_radians()),
            MovementClass::RunAccel => (0.0, 2.5, 0.0),
            MovementClass::RunDecel => (0.0, -2.5, 0.0),
            _ => (0.4, 0.0, 0.0),
        };
        let (brake, propel) = if sidestep {
            (0.55 + 0.1 * b_draw[0], 0.28 + 0.07 * b_draw[1])
        } else {
            let brake = 0.38 + 0.07 * b_draw[0];
            (brake, brake + 0.06 + 0.04 * b_draw[1])
        };
        let speed_scale = (speed / 4.0).sqrt();
        let shape = ForceShape {
            impact: (
                (1.2 + 0.3 * style[1]) * speed_scale * if sidestep { 1.2 } else { 1.0 },
                0.14 + 0.03 * style[2],
                0.06,
            ),
            active: ((2.4 + 0.3 * style[3]) * if sidestep { 0.9 } else { 1.0 }, 0.5 + 0.05 * style[4], 0.18),
            brake,
            propel,
            lateral: if sidestep { 0.45 + 0.1 * lat_draw } else { 0.07 + 0.03 * lat_draw },
            cop_y0: -0.06 + 0.01 * style[5],
            cop_dy: 0.12 + 0.01 * style[0],
            cop_x: 0.02 + 0.005 * style[1],
            free: 0.004 * (1.0 + 0.3 * style[2]),
        };

        let omega = 2.0 * PI * stride_hz;
        let mut amp = [[0.0; 3]; 5];
        for k in 0..5 {
            for j in 0..3 {
                amp[k][j] = OSC_AMP[k][j] * jitter[k];
            }
        }
        Motion {
            mass,
            height,
            speed,
            fs_t,
            stance_s,
            duration,
            dv,
            dv_tau: 0.5,
            trend,
            turn,
            turn_tau: 0.45,
            omega,
            amp,
            burst_amp: 30.0 + 3.0 * burst_draw,
            impact_amp: (15.0 + 5.0 * impact_draw) * speed_scale,
            shape,
        }
    }

    fn force_normalized(&self, t: f64) -> Vec6 {
        self.shape.eval((t - self.fs_t) / self.stance_s)
    }

    fn window(&self, t: f64) -> (f64, f64, f64) {
        let rise_end = WINDOW_START_S + WINDOW_RAMP_S;
        let fall_start = self.duration - rise_end;
        if t < rise_end {
            let (s, d1, d2) = smoothstep((t - WINDOW_START_S) / WINDOW_RAMP_S);
            (s, d1 / WINDOW_RAMP_S, d2 / (WINDOW_RAMP_S * WINDOW_RAMP_S))
        } else if t > fall_start {
            let (s, d1, d2) = smoothstep((self.duration - WINDOW_START_S - t) / WINDOW_RAMP_S);
            (s, -d1 / WINDOW_RAMP_S, d2 / (WINDOW_RAMP_S * WINDOW_RAMP_S))
        } else {
            (1.0, 0.0, 0.0)
        }
    }

    fn t_mid(&self) -> f64 {
        self.fs_t + self.stance_s / 2.0
    }

    fn path_speed(&self, t: f64) -> (f64, f64) {
        let (s, d1, _) = smoothstep((t - self.t_mid()) / self.dv_tau + 0.5);
        let mid = self.duration / 2.0;
        (
            self.speed + self.dv * s + self.trend * (t - mid),
            self.dv * d1 / self.dv_tau + self.trend,
        )
    }

    fn heading(&self, t: f64) -> (f64, f64) {
        let (s, d1, _) = smoothstep((t - self.t_mid()) / self.turn_tau + 0.5);
        (self.turn * s, self.turn * d1 / self.turn_tau)
    }

    /// Horizontal acceleration of the body path.
    fn path_accel(&self, t: f64) -> Vec3 {
        let (v, dv) = self.path_speed(t);
        let (th, dth) = self.heading(t);
        // direction of travel (-sin θ, cos θ); positive θ turns left (towards -x)
        let (s, c) = th.sin_cos();
        [dv * -s + v * dth * -c, dv * c + v * dth * -s, 0.0]
    }

    /// Kinematic acceleration (no gravity) of a location in the lab frame.
    fn kinematic_accel(&self, loc: SensorLocation, t: f64) -> Vec3 {
        let k = loc.index();
        let mut a = self.path_accel(t);
        let (w, w1, w2) = self.window(t);
        let tc = t - self.t_mid();
        for j in 0..3 {
            // second derivative of w(t) · (A/ω²) · sin(ω (t - t_mid) + φ)
            if self.amp[k][j] == 0.0 {
                continue;
            }
            let (mult, phi) = OSC_SHAPE[k][j];
            let omega = mult * self.omega;
            let (sn, cs) = (omega * tc + phi).sin_cos();
            let d = self.amp[k][j] / (omega * omega);
            a[j] += d * (w2 * sn + 2.0 * w1 * omega * cs - w * omega * omega * sn);
        }
        let u = (t - self.fs_t) / self.stance_s;
        if BURST_GAIN[k] > 0.0 && (0.0..1.0).contains(&u) {
            a[1] += BURST_GAIN[k] * self.burst_amp * (PI * u).sin() * (2.0 * PI * BURST_HZ * (t - self.fs_t)).sin();
        }
        let f = self.force_normalized(t);
        for j in 0..3 {
            a[j] += COUPLING[k][j] * f[j] * GRAVITY;
        }
        if loc == SensorLocation::RShank {
            let tp = t - self.fs_t;
            if tp >= 0.0 {
                a[2] += self.impact_amp * (-tp / 0.015).exp() * (2.0 * PI * 30.0 * tp).sin();
            }
        }
        a
    }

    fn start_position(&self, loc: SensorLocation) -> Vec3 {
        let h = self.height;
        match loc {
            SensorLocation::Pelvis => [0.0, 0.0, 0.53 * h],
            SensorLocation::LThigh => [-0.09, 0.0, 0.4 * h],
            SensorLocation::RThigh => [0.09, 0.0, 0.4 * h],
            SensorLocation::LShank => [-0.08, 0.0, 0.18 * h],
            SensorLocation::RShank => [0.08, 0.0, 0.18 * h],
        }
    }

    fn frames(&self, rate: f64) -> usize {
        (self.duration * rate).round() as usize + 1
    }

    fn marker_track(&self, loc: SensorLocation, rate: f64) -> SensorTrack {
        let n = self.frames(rate);
        let h = 1.0 / rate;
        let mut p = Vec::with_capacity(n);
        let p0 = self.start_position(loc);
        let a0 = self.kinematic_accel(loc, 0.0);
        let v0 = self.speed - self.trend * self.duration / 2.0;
        p.push(p0);
        p.push([p0[0] + 0.5 * h * h * a0[0], p0[1] + h * v0 + 0.5 * h * h * a0[1], p0[2] + 0.5 * h * h * a0[2]]);
        for i in 1..n - 1 {
            let a = self.kinematic_accel(loc, i as f64 * h);
            let (cur, prev) = (p[i], p[i - 1]);
            p.push([
                2.0 * cur[0] - prev[0] + h * h * a[0],
                2.0 * cur[1] - prev[1] + h * h * a[1],
                2.0 * cur[2] - prev[2] + h * h * a[2],
            ]);
        }
        SensorTrack::new(loc, rate, TrackKind::Position, p)
    }

    fn accel_track(&self, loc: SensorLocation, rate: f64) -> SensorTrack {
        let n = self.frames(rate);
        let samples = (0..n)
            .map(|i| {
                let mut a = self.kinematic_accel(loc, i as f64 / rate);
                a[2] += GRAVITY;
                a
            })
            .collect();
        SensorTrack::new(loc, rate, TrackKind::Acceleration, samples)
    }

    fn force_track(&self, rate: f64) -> (ForceTrack, usize, usize) {
        let n = self.frames(rate);
        let fs = (self.fs_t * rate).round() as usize;
        let frames = (self.stance_s * rate).round() as usize;
        let bw = self.mass * GRAVITY;
        let channels = (0..n)
            .map(|i| {
                let f = if i >= fs && i < fs + frames {
                    self.shape.eval((i - fs) as f64 / frames as f64)
                } else {
                    [0.0; 6]
                };
                [f[0] * bw, f[1] * bw, f[2] * bw, f[3] * bw * self.height, f[4] * bw * self.height, f[5] * bw * self.height]
            })
            .collect();
        (ForceTrack::new(rate, channels), fs, fs + frames)
    }
}

fn uniform_rotation(rng: &mut ChaCha8Rng) -> RotationMatrix3 {
    loop {
        let q: [f64; 4] = std::array::from_fn(|_| StandardNormal.sample(rng));
        if q.iter().map(|v| v * v).sum::<f64>() > 1e-6 {
            return RotationMatrix3::from_quaternion(q[0], q[1], q[2], q[3]);
        }
    }
}

fn trial_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

/// Deterministic synthetic trial for `(spec.seed, index)`.
///
/// Markers trials carry position tracks at `marker_hz`, accelerometer trials
/// acceleration tracks at `sensor_hz` with mount rotation and noise applied.
/// Both kinds carry the force plate at `force_hz` and the ground truth in
/// `oracle`. For the same seed and index the two kinds describe the same motion.
pub fn generate_synthetic_trial(spec: &SynthSpec, index: usize) -> TrialRecord {
    let mut rng = trial_rng(spec.seed, index);
    let motion = Motion::draw(spec, &mut rng);
    let mounts: Vec<RotationMatrix3> = (0..5).map(|_| uniform_rotation(&mut rng)).collect();

    let sensors = SensorLocation::ALL
        .iter()
        .map(|&loc| match spec.source_kind {
            SourceKind::Markers => motion.marker_track(loc, spec.marker_hz),
            SourceKind::Accelerometers => motion.accel_track(loc, spec.sensor_hz),
        })
        .collect();
    let (force, fs, to) = motion.force_track(spec.force_hz);
    let limb = spec.stance_limb.limb_for(index);
    let mut trial = TrialRecord {
        trial_id: spec.trial_id(index),
        subject: SubjectMeta::new(motion.mass, motion.height),
        sensors,
        force: Some(force),
        movement_label: Some(spec.movement),
        source_kind: spec.source_kind,
        stance_limb: Some(Limb::Right),
        mirrored: false,
        oracle: Some(OracleTruth {
            fs_frame: fs,
            to_frame: to,
            stance_limb: Limb::Right,
            speed_mps: motion.speed,
            movement: spec.movement.as_str().to_string(),
        }),
    };
    if limb == Limb::Left {
        trial = reflect_sagittal(&trial);
        trial.mirrored = false;
    }

    if spec.source_kind == SourceKind::Accelerometers {
        for track in &mut trial.sensors {
            let mount = match &spec.mount_rotation {
                MountRotation::Identity => None,
                MountRotation::Random => Some(mounts[track.location.index()]),
                MountRotation::Fixed(r) => Some(r[track.location.index()]),
            };
            if let Some(r) = mount {
                for s in &mut track.samples {
                    *s = r.apply(*s);
                }
            }
        }
        if spec.noise_std_mps2 > 0.0 {
            for track in &mut trial.sensors {
                for s in &mut track.samples {
                    for v in s.iter_mut() {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        *v += spec.noise_std_mps2 * z;
                    }
                }
            }
        }
    }
    trial
}

/// Force-plate waveform of a generated trial evaluated in closed form, in
/// newtons and newton-metres.
pub fn closed_form_force(spec: &SynthSpec, index: usize) -> ForceTrack {
    let mut rng = trial_rng(spec.seed, index);
    let motion = Motion::draw(spec, &mut rng);
    let (mut force, _, _) = motion.force_track(spec.force_hz);
    if spec.stance_limb.limb_for(index) == Limb::Left {
        for c in &mut force.channels {
            *c = mirror_force_frame(*c);
        }
    }
    force
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusRow {
    pub trial_id: String,
    pub movement: String,
    pub stance_limb: String,
    pub speed_mps: f64,
    pub path: String,
}

pub const CORPUS_INDEX: &str = "index.csv";

/// Writes every trial of every spec under `out_dir/<trial_id>/` plus an
/// `index.csv` listing them.
pub fn generate_corpus(specs: &[SynthSpec], out_dir: &Path) -> Result<Vec<CorpusRow>, SimError> {
    for s in specs {
        s.validate()?;
    }
    let jobs: Vec<(&SynthSpec, usize)> = specs.iter().flat_map(|s| (0..s.n_trials).map(move |i| (s, i))).collect();
    let mut seen = std::collections::HashSet::new();
    for (s, i) in &jobs {
        let id = s.trial_id(*i);
        if !seen.insert(id.clone()) {
            return Err(SimError::DuplicateTrialId(id));
        }
    }
    fs::create_dir_all(out_dir).map_err(|source| SimError::Io { path: out_dir.to_path_buf(), source })?;
    let rows = jobs
        .par_iter()
        .map(|(spec, index)| {
            let trial = generate_synthetic_trial(spec, *index);
            write_trial(&trial, &out_dir.join(&trial.trial_id))?;
            let oracle = trial.oracle.as_ref().expect("generated trials carry ground truth");
            Ok(CorpusRow {
                trial_id: trial.trial_id.clone(),
                movement: oracle.movement.clone(),
                stance_limb: oracle.stance_limb.as_str().to_string(),
                speed_mps: oracle.speed_mps,
                path: trial.trial_id.clone(),
            })
        })
        .collect::<Result<Vec<_>, SimError>>()?;
    write_corpus_index(&rows, &out_dir.join(CORPUS_INDEX))?;
    Ok(rows)
}

pub fn write_corpus_index(rows: &[CorpusRow], path: &Path) -> Result<(), SimError> {
    let mut text = String::from("trial_id,movement,stance_limb,speed_mps,path\n");
    for r in rows {
        let _ = writeln!(text, "{},{},{},{},{}", r.trial_id, r.movement, r.stance_limb, r.speed_mps, r.path);
    }
    fs::write(path, text).map_err(|source| SimError::Io { path: path.to_path_buf(), source })
}

pub fn read_corpus_index(path: &Path) -> Result<Vec<CorpusRow>, SimError> {
    let io = |source| SimError::Io { path: path.to_path_buf(), source };
    let text = fs::read_to_string(path).map_err(io)?;
    let mut reader = csv::Reader::from_reader(text.as_bytes());
    reader
        .deserialize()
        .map(|r| r.map_err(|e| io(std::io::Error::new(std::io::ErrorKind::InvalidData, e))))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gait::{classify_movement, detect_stance_events, detect_stance_limb, ClassifyParams, ContactParams};
    use crate::ingest::parse_trial;
    use proptest::prelude::*;

    fn pos_track(rate: f64, f: impl Fn(f64) -> Vec3, n: usize) -> SensorTrack {
        SensorTrack::new(SensorLocation::Pelvis, rate, TrackKind::Position, (0..n).map(|i| f(i as f64 / rate)).collect())
    }

    fn no_gravity() -> VirtualImuConfig {
        VirtualImuConfig { include_gravity: false, ..Default::default() }
    }

    #[test]
    fn quadratic_positions_differentiate_exactly() {
        let t = pos_track(250.0, |t| [0.0, 0.0, t * t], 50);
        let a = double_differentiate(&t, &no_gravity()).unwrap();
        for s in &a.samples {
            assert!((s[2] - 2.0).abs() <= 1e-12, "{}", s[2]);
            assert_eq!(s[0], 0.0);
        }
    }

    #[test]
    fn constant_position_gives_gravity() {
        let t = pos_track(250.0, |_| [0.3, -1.0, 1.0], 20);
        let a = double_differentiate(&t, &VirtualImuConfig::default()).unwrap();
        assert!(a.samples.iter().all(|s| s == &[0.0, 0.0, GRAVITY]));
    }

    #[test]
    fn sinusoid_error_within_stencil_bound() {
        let w = 2.0 * PI * 2.0;
        let h = 1.0 / 250.0;
        let t = pos_track(250.0, |t| [0.0, (w * t).sin(), 0.0], 250);
        let a = double_differentiate(&t, &no_gravity()).unwrap();
        // truncation error of the central stencil: h²/12 · max|p''''| relative to max|a|
        let bound = h * h / 12.0 * w.powi(4) / (w * w);
        let mut worst: f64 = 0.0;
        for i in 1..a.len() - 1 {
            let exact = -w * w * (w * i as f64 * h).sin();
            worst = worst.max((a.samples[i][1] - exact).abs() / (w * w));
        }
        assert!(worst <= bound, "{worst} > {bound}");
        assert!(worst > bound * 0.5);
    }

    #[test]
    fn short_tracks_are_rejected() {
        let t = pos_track(250.0, |_| [0.0; 3], 2);
        assert!(matches!(double_differentiate(&t, &no_gravity()), Err(SimError::TrackTooShort(2))));
        let t3 = pos_track(250.0, |t| [t * t, 0.0, 0.0], 3);
        let a = double_differentiate(&t3, &no_gravity()).unwrap();
        assert!(a.samples.iter().all(|s| (s[0] - 2.0).abs() < 1e-9));
    }

    #[test]
    fn config_is_validated() {
        let t = pos_track(250.0, |_| [0.0; 3], 10);
        let up = VirtualImuConfig { output_hz: 500.0, ..Default::default() };
        assert!(matches!(double_differentiate(&t, &up), Err(SimError::InvalidConfig(_))));
        let cut = VirtualImuConfig { lowpass_cutoff_hz: Some(200.0), ..Default::default() };
        assert!(matches!(double_differentiate(&t, &cut), Err(SimError::InvalidConfig(_))));
    }

    #[test]
    fn output_is_resampled() {
        let t = pos_track(1000.0, |t| [0.0, 0.0, t * t], 1001);
        let a = double_differentiate(&t, &no_gravity()).unwrap();
        assert_eq!(a.rate_hz, 250.0);
        assert_eq!(a.len(), 251);
    }

    #[test]
    fn lowpass_keeps_slow_signals_and_damps_fast_ones() {
        let rate = 250.0;
        let slow: Vec<f64> = (0..500).map(|i| (2.0 * PI * 2.0 * i as f64 / rate).sin()).collect();
        let fast: Vec<f64> = (0..500).map(|i| (2.0 * PI * 60.0 * i as f64 / rate).sin()).collect();
        let fs = filtfilt_lowpass(&slow, rate, 20.0);
        let ff = filtfilt_lowpass(&fast, rate, 20.0);
        let mid = 100..400;
        assert!(mid.clone().all(|i| (fs[i] - slow[i]).abs() < 1e-2));
        assert!(mid.clone().all(|i| ff[i].abs() < 0.05));
        let flat = filtfilt_lowpass(&[3.0; 40], rate, 20.0);
        assert!(flat.iter().all(|v| (v - 3.0).abs() < 1e-12));
    }

    fn run_spec() -> SynthSpec {
        SynthSpec { seed: 7, n_trials: 1, movement: MovementClass::RunSlow, speed_mps: 2.5, stance_ms: 250.0, ..Default::default() }
    }

    fn force_equal(a: &TrialRecord, b: &TrialRecord) -> bool {
        a.force == b.force
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_synthetic_trial(&run_spec(), 0);
        let b = generate_synthetic_trial(&run_spec(), 0);
        assert_eq!(a, b);
        assert!(force_equal(&a, &b));
        let c = generate_synthetic_trial(&run_spec(), 1);
        assert_ne!(a.subject, c.subject);
    }

    fn lateral_impulse(t: &TrialRecord) -> f64 {
        let f = t.force.as_ref().unwrap();
        f.channels.iter().map(|c| c[0].abs()).sum::<f64>() / f.rate_hz
    }

    #[test]
    fn sidestep_has_larger_lateral_impulse() {
        let run = generate_synthetic_trial(&run_spec(), 0);
        let side = generate_synthetic_trial(&SynthSpec { movement: MovementClass::Sidestep, ..run_spec() }, 0);
        assert!(lateral_impulse(&side) > lateral_impulse(&run));
    }

    fn rms_diff(a: &SensorTrack, b: &SensorTrack) -> f64 {
        assert_eq!(a.len(), b.len());
        let sum: f64 = a.samples.iter().zip(&b.samples).map(|(x, y)| (0..3).map(|k| (x[k] - y[k]).powi(2)).sum::<f64>()).sum();
        (sum / (3 * a.len()) as f64).sqrt()
    }

    #[test]
    fn markers_reproduce_accelerometers() {
        for (movement, speed) in [(MovementClass::RunModerate, 4.0), (MovementClass::Sidestep, 4.0), (MovementClass::RunAccel, 5.0)] {
            for index in 0..2 {
                let base = SynthSpec { movement, speed_mps: speed, ..run_spec() };
                let markers = generate_synthetic_trial(&base, index);
                let accel = generate_synthetic_trial(&SynthSpec { source_kind: SourceKind::Accelerometers, ..base.clone() }, index);
                for (m, a) in markers.sensors.iter().zip(&accel.sensors) {
                    let derived = double_differentiate(m, &VirtualImuConfig::default()).unwrap();
                    let recorded = resample_uniform(a, 250.0).unwrap();
                    let err = rms_diff(&derived, &recorded);
                    assert!(err <= 1e-6, "{movement:?} {} rms {err}", m.location);
                }
            }
        }
    }

    #[test]
    fn ground_truth_brackets_contact() {
        for index in 0..20 {
            let spec = SynthSpec { speed_jitter_mps: 0.3, stance_jitter_ms: 30.0, ..run_spec() };
            let t = generate_synthetic_trial(&spec, index);
            let o = t.oracle.as_ref().unwrap();
            let f = t.force.as_ref().unwrap();
            for (i, c) in f.channels.iter().enumerate() {
                if c[2] > 20.0 {
                    assert!(i >= o.fs_frame && i < o.to_frame);
                }
            }
            let w = detect_stance_events(f, &ContactParams::default()).unwrap();
            assert_eq!((w.fs_frame, w.to_frame), (o.fs_frame, o.to_frame));
        }
    }

    #[test]
    fn stance_limb_follows_policy_and_is_detectable() {
        let spec = SynthSpec { source_kind: SourceKind::Accelerometers, noise_std_mps2: 0.5, mount_rotation: MountRotation::Random, ..run_spec() };
        for index in 0..6 {
            let t = generate_synthetic_trial(&spec, index);
            let expected = if index % 2 == 0 { Limb::Right } else { Limb::Left };
            assert_eq!(t.stance_limb, Some(expected));
            assert_eq!(t.oracle.as_ref().unwrap().stance_limb, expected);
            assert!(!t.mirrored);
            let w = detect_stance_events(t.force.as_ref().unwrap(), &ContactParams::default()).unwrap();
            assert_eq!(detect_stance_limb(&t, &w).unwrap().limb, expected);
        }
    }

    #[test]
    fn left_trials_mirror_force() {
        let spec = run_spec();
        let left = generate_synthetic_trial(&spec, 1);
        let closed = closed_form_force(&spec, 1);
        assert_eq!(left.force.as_ref().unwrap(), &closed);
        // medial push of the left foot points to +x
        assert!(closed.channels.iter().any(|c| c[0] > 0.0));
    }

    #[test]
    fn generated_markers_classify_as_their_template() {
        let params = ClassifyParams::default();
        let cases = [
            (MovementClass::RunSlow, 2.8, MovementClass::RunSlow),
            (MovementClass::RunModerate, 4.5, MovementClass::RunModerate),
            (MovementClass::RunFast, 6.5, MovementClass::RunFast),
            (MovementClass::Sidestep, 4.0, MovementClass::Sidestep),
        ];
        for (movement, speed, expected) in cases {
            for index in 0..4 {
                let spec = SynthSpec { movement, speed_mps: speed, ..run_spec() };
                let t = generate_synthetic_trial(&spec, index);
                let w = detect_stance_events(t.force.as_ref().unwrap(), &ContactParams::default()).unwrap();
                let label = classify_movement(&t, Some(&w), &params).unwrap();
                assert_eq!(label.class, expected, "{movement:?} #{index}: {label:?}");
            }
        }
        for (movement, trend) in [(MovementClass::RunAccel, MovementClass::RunAccel), (MovementClass::RunDecel, MovementClass::RunDecel)] {
            let t = generate_synthetic_trial(&SynthSpec { movement, speed_mps: 5.0, ..run_spec() }, 0);
            let w = detect_stance_events(t.force.as_ref().unwrap(), &ContactParams::default()).unwrap();
            assert_eq!(classify_movement(&t, Some(&w), &params).unwrap().trend, Some(trend));
        }
    }

    #[test]
    fn specs_are_validated() {
        assert!(run_spec().validate().is_ok());
        assert!(SynthSpec { n_trials: 0, ..run_spec() }.validate().is_err());
        assert!(SynthSpec { speed_mps: 1.5, ..run_spec() }.validate().is_err());
        assert!(SynthSpec { movement: MovementClass::Other, ..run_spec() }.validate().is_err());
        assert!(SynthSpec { stance_ms: 0.0, ..run_spec() }.validate().is_err());
        assert!(SynthSpec { noise_std_mps2: -1.0, ..run_spec() }.validate().is_err());
        let json = r#"{"seed":1,"n_trials":2,"movement":"sidestep","speed_mps":4.0,"stance_ms":260,"mount_rotation":"random","source_kind":"accelerometers"}"#;
        let spec: SynthSpec = serde_json::from_str(json).unwrap();
        assert_eq!(spec.mount_rotation, MountRotation::Random);
        assert!(spec.validate().is_ok());
    }

    #[test]
    fn corpus_is_indexed_and_byte_stable() {
        let dir = tempfile::tempdir().unwrap();
        let specs = vec![
            SynthSpec { n_trials: 10, ..run_spec() },
            SynthSpec { n_trials: 10, movement: MovementClass::Sidestep, speed_mps: 4.0, source_kind: SourceKind::Accelerometers, ..run_spec() },
        ];
        let rows = generate_corpus(&specs, dir.path()).unwrap();
        assert_eq!(rows.len(), 20);
        let index = read_corpus_index(&dir.path().join(CORPUS_INDEX)).unwrap();
        assert_eq!(index, rows);
        let parseable = fs::read_dir(dir.path())
            .unwrap()
            .filter_map(Result::ok)
            .filter(|e| e.path().is_dir() && parse_trial(&e.path()).is_ok())
            .count();
        assert_eq!(parseable, index.len());

        let first = fs::read(dir.path().join(&rows[3].path).join("trial.json")).unwrap();
        let idx = fs::read(dir.path().join(CORPUS_INDEX)).unwrap();
        generate_corpus(&specs, dir.path()).unwrap();
        assert_eq!(fs::read(dir.path().join(&rows[3].path).join("trial.json")).unwrap(), first);
        assert_eq!(fs::read(dir.path().join(CORPUS_INDEX)).unwrap(), idx);

        let parsed = parse_trial(&dir.path().join(&rows[12].path)).unwrap();
        assert_eq!(parsed, generate_synthetic_trial(&specs[1], 2));
    }

    #[test]
    fn duplicate_ids_are_refused() {
        let dir = tempfile::tempdir().unwrap();
        let specs = vec![run_spec(), run_spec()];
        assert!(matches!(generate_corpus(&specs, dir.path()), Err(SimError::DuplicateTrialId(_))));
    }

    fn positions() -> impl Strategy<Value = Vec<Vec3>> {
        proptest::collection::vec(proptest::array::uniform3(-5.0f64..5.0), 4..40)
    }

    proptest! {
        #[test]
        fn differentiation_is_linear(p in positions(), q in positions(), alpha in -3.0f64..3.0, beta in -3.0f64..3.0) {
            let n = p.len().min(q.len());
            let mk = |s: Vec<Vec3>| SensorTrack::new(SensorLocation::Pelvis, 250.0, TrackKind::Position, s);
            let combo: Vec<Vec3> = (0..n).map(|i| std::array::from_fn(|k| alpha * p[i][k] + beta * q[i][k])).collect();
            let a = double_differentiate(&mk(p[..n].to_vec()), &no_gravity()).unwrap();
            let b = double_differentiate(&mk(q[..n].to_vec()), &no_gravity()).unwrap();
            let c = double_differentiate(&mk(combo), &no_gravity()).unwrap();
            for i in 0..n {
                for k in 0..3 {
                    let expect = alpha * a.samples[i][k] + beta * b.samples[i][k];
                    // values scale with 1/h²; compare relative to that scale
                    prop_assert!((c.samples[i][k] - expect).abs() <= 1e-10 * 250.0 * 250.0 * 50.0);
                }
            }
        }

        #[test]
        fn gravity_toggle_adds_exactly_g(p in positions()) {
            let t = SensorTrack::new(SensorLocation::Pelvis, 250.0, TrackKind::Position, p);
            let on = double_differentiate(&t, &VirtualImuConfig::default()).unwrap();
            let off = double_differentiate(&t, &no_gravity()).unwrap();
            for (a, b) in on.samples.iter().zip(&off.samples) {
                prop_assert_eq!(a[0], b[0]);
                prop_assert_eq!(a[1], b[1]);
                // a single rounding of the addition
                prop_assert!(((a[2] - b[2]) - GRAVITY).abs() <= 2.0 * f64::EPSILON * b[2].abs().max(GRAVITY));
            }
        }

        #[test]
        fn time_reversal_reverses_interior(p in positions()) {
            let fwd = SensorTrack::new(SensorLocation::Pelvis, 250.0, TrackKind::Position, p.clone());
            let mut rev_samples = p;
            rev_samples.reverse();
            let rev = SensorTrack::new(SensorLocation::Pelvis, 250.0, TrackKind::Position, rev_samples);
            let a = double_differentiate(&fwd, &no_gravity()).unwrap();
            let b = double_differentiate(&rev, &no_gravity()).unwrap();
            let n = a.len();
            for i in 1..n - 1 {
                prop_assert_eq!(a.samples[i], b.samples[n - 1 - i]);
            }
        }
    }
}
