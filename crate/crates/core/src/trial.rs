//! Canonical in-memory representation of one capture trial.

use serde::{Deserialize, Serialize};
use std::fmt;

/// Standard gravity used for accelerometer convention and body-weight scaling.
pub const GRAVITY: f64 = 9.81;

pub type Vec3 = [f64; 3];
pub type Vec6 = [f64; 6];

/// The five body locations carrying a sensor (or its proxy marker).
///
/// Declaration order is the canonical order used everywhere a trial is
/// serialized or flattened into an image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SensorLocation {
    Pelvis,
    LThigh,
    RThigh,
    LShank,
    RShank,
}

impl SensorLocation {
    pub const ALL: [SensorLocation; 5] = [
        SensorLocation::Pelvis,
        SensorLocation::LThigh,
        SensorLocation::RThigh,
        SensorLocation::LShank,
        SensorLocation::RShank,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    /// Short sensor-style name (`Pelv`, `L_Th`, ...).
    pub fn name(self) -> &'static str {
        match self {
            SensorLocation::Pelvis => "Pelv",
            SensorLocation::LThigh => "L_Th",
            SensorLocation::RThigh => "R_Th",
            SensorLocation::LShank => "L_Sh",
            SensorLocation::RShank => "R_Sh",
        }
    }

    /// Accepts both the accelerometer naming (`Pelv`, `L_Th`, ...) and the
    /// marker naming (`SACR`, `LTH2`, ...), case-insensitively.
    pub fn from_name(name: &str) -> Option<Self> {
        let upper = name.trim().to_ascii_uppercase();
        let loc = match upper.as_str() {
            "PELV" | "PELVIS" | "SACR" | "SACRUM" => SensorLocation::Pelvis,
            "L_TH" | "LTH2" | "LTHIGH" | "L_THIGH" => SensorLocation::LThigh,
            "R_TH" | "RTH2" | "RTHIGH" | "R_THIGH" => SensorLocation::RThigh,
            "L_SH" | "LTB2" | "LSHANK" | "L_SHANK" => SensorLocation::LShank,
            "R_SH" | "RTB2" | "RSHANK" | "R_SHANK" => SensorLocation::RShank,
            _ => return None,
        };
        Some(loc)
    }

    /// Location on the opposite side of the sagittal plane.
    pub fn mirrored(self) -> Self {
        match self {
            SensorLocation::Pelvis => SensorLocation::Pelvis,
            SensorLocation::LThigh => SensorLocation::RThigh,
            SensorLocation::RThigh => SensorLocation::LThigh,
            SensorLocation::LShank => SensorLocation::RShank,
            SensorLocation::RShank => SensorLocation::LShank,
        }
    }
}

impl fmt::Display for SensorLocation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// What the three columns of a [`SensorTrack`] hold.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrackKind {
    /// Marker positions in metres.
    Position,
    /// 3D linear acceleration in m/s².
    Acceleration,
    /// Euclidean magnitude broadcast to all three columns.
    Magnitude,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceKind {
    Markers,
    Accelerometers,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Limb {
    Left,
    Right,
}

impl Limb {
    pub fn as_str(self) -> &'static str {
        match self {
            Limb::Left => "left",
            Limb::Right => "right",
        }
    }

    pub fn opposite(self) -> Self {
        match self {
            Limb::Left => Limb::Right,
            Limb::Right => Limb::Left,
        }
    }
}

/// Movement templates and speed bins. `RunAccel`/`RunDecel` are carried as a
/// separate trend label next to the speed bin, see [`crate::gait::MovementLabel`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MovementClass {
    RunSlow,
    RunModerate,
    RunFast,
    RunAccel,
    RunDecel,
    Sidestep,
    Other,
}

impl MovementClass {
    pub fn as_str(self) -> &'static str {
        match self {
            MovementClass::RunSlow => "run_slow",
            MovementClass::RunModerate => "run_moderate",
            MovementClass::RunFast => "run_fast",
            MovementClass::RunAccel => "run_accel",
            MovementClass::RunDecel => "run_decel",
            MovementClass::Sidestep => "sidestep",
            MovementClass::Other => "other",
        }
    }

    pub fn is_run(self) -> bool {
        matches!(
            self,
            MovementClass::RunSlow
                | MovementClass::RunModerate
                | MovementClass::RunFast
                | MovementClass::RunAccel
                | MovementClass::RunDecel
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sex {
    Female,
    Male,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectMeta {
    pub mass_kg: f64,
    pub height_m: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sex: Option<Sex>,
}

impl SubjectMeta {
    pub fn new(mass_kg: f64, height_m: f64) -> Self {
        SubjectMeta { mass_kg, height_m, sex: None }
    }

    pub fn is_valid(&self) -> bool {
        self.mass_kg.is_finite() && self.mass_kg > 0.0 && self.height_m.is_finite() && self.height_m > 0.0
    }

    pub fn body_weight_n(&self) -> f64 {
        self.mass_kg * GRAVITY
    }
}

/// Uniformly sampled 3-vector track for one body location.
///
/// Axis convention is fixed: x lateral, y anterior, z vertical. Between parse
/// and the quality gate, missing frames are held as NaN.
#[derive(Debug, Clone, PartialEq)]
pub struct SensorTrack {
    pub location: SensorLocation,
    pub rate_hz: f64,
    pub kind: TrackKind,
    pub samples: Vec<Vec3>,
}

impl SensorTrack {
    pub fn new(location: SensorLocation, rate_hz: f64, kind: TrackKind, samples: Vec<Vec3>) -> Self {
        SensorTrack { location, rate_hz, kind, samples }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        if self.samples.is_empty() {
            0.0
        } else {
            (self.samples.len() - 1) as f64 / self.rate_hz
        }
    }

    pub fn is_finite(&self) -> bool {
        self.samples.iter().all(|s| s.iter().all(|v| v.is_finite()))
    }
}

/// Force-plate channels `(Fx, Fy, Fz, Mx, My, Mz)` in N and N·m.
#[derive(Debug, Clone, PartialEq)]
pub struct ForceTrack {
    pub rate_hz: f64,
    pub channels: Vec<Vec6>,
}

impl ForceTrack {
    pub fn new(rate_hz: f64, channels: Vec<Vec6>) -> Self {
        ForceTrack { rate_hz, channels }
    }

    pub fn len(&self) -> usize {
        self.channels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.channels.is_empty()
    }

    pub fn vertical(&self) -> impl Iterator<Item = f64> + '_ {
        self.channels.iter().map(|c| c[2])
    }
}

/// Ground-truth events recorded by the synthetic generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleTruth {
    pub fs_frame: usize,
    pub to_frame: usize,
    pub stance_limb: Limb,
    pub speed_mps: f64,
    pub movement: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrialRecord {
    pub trial_id: String,
    pub subject: SubjectMeta,
    /// Sorted in canonical [`SensorLocation`] order.
    pub sensors: Vec<SensorTrack>,
    pub force: Option<ForceTrack>,
    pub movement_label: Option<MovementClass>,
    pub source_kind: SourceKind,
    pub stance_limb: Option<Limb>,
    /// Set when the trial has been reflected onto the opposite limb.
    pub mirrored: bool,
    pub oracle: Option<OracleTruth>,
}

impl TrialRecord {
    pub fn sensor(&self, location: SensorLocation) -> Option<&SensorTrack> {
        self.sensors.iter().find(|s| s.location == location)
    }

    pub fn sensor_mut(&mut self, location: SensorLocation) -> Option<&mut SensorTrack> {
        self.sensors.iter_mut().find(|s| s.location == location)
    }

    pub fn sort_sensors(&mut self) {
        self.sensors.sort_by_key(|s| s.location);
    }

    pub fn has_full_topology(&self) -> bool {
        SensorLocation::ALL.iter().all(|l| self.sensor(*l).is_some())
    }

    /// Sample rate shared by the sensor tracks, if any.
    pub fn sensor_rate(&self) -> Option<f64> {
        self.sensors.first().map(|s| s.rate_hz)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn naming_conventions_map_to_same_location() {
        for (a, b) in [("Pelv", "SACR"), ("L_Th", "LTH2"), ("R_Th", "RTH2"), ("L_Sh", "LTB2"), ("R_Sh", "RTB2")] {
            assert_eq!(SensorLocation::from_name(a), SensorLocation::from_name(b));
            assert!(SensorLocation::from_name(a).is_some());
        }
        assert_eq!(SensorLocation::from_name("elbow"), None);
    }

    #[test]
    fn mirrored_location_is_involution() {
        for loc in SensorLocation::ALL {
            assert_eq!(loc.mirrored().mirrored(), loc);
        }
        assert_eq!(SensorLocation::LShank.mirrored(), SensorLocation::RShank);
    }
}
