//! Browser demo: synthetic trials rendered as encoded images, force curves
//! and before/after alignment traces.

use accel2grf::align::{align_trial, AlignmentMode};
use accel2grf::encode::{encode_image, EncodeConfig};
use accel2grf::gait::{detect_stance_events, ContactParams};
use accel2grf::simulate::{generate_synthetic_trial, LimbPolicy, MountRotation, SynthSpec};
use accel2grf::{MovementClass, SensorLocation, SourceKind, TrialRecord};
use wasm_bindgen::prelude::*;

const MOVEMENTS: [MovementClass; 7] = [
    MovementClass::RunSlow,
    MovementClass::RunModerate,
    MovementClass::RunFast,
    MovementClass::RunAccel,
    MovementClass::RunDecel,
    MovementClass::Sidestep,
    MovementClass::Other,
];

fn movement(name: &str) -> Result<MovementClass, String> {
    MOVEMENTS.into_iter().find(|m| m.as_str() == name).ok_or_else(|| format!("unknown movement {name:?}"))
}

fn alignment(name: &str) -> Result<AlignmentMode, String> {
    match name {
        "norm" => Ok(AlignmentMode::Norm),
        "pca" => Ok(AlignmentMode::Pca),
        other => Err(format!("unknown alignment {other:?}")),
    }
}

fn typical_speed(m: MovementClass) -> f64 {
    match m {
        MovementClass::RunSlow => 3.0,
        MovementClass::RunFast => 6.0,
        MovementClass::Sidestep => 3.0,
        _ => 4.5,
    }
}

fn worn_trial(seed: u32, movement: MovementClass, random_mount: bool) -> TrialRecord {
    let spec = SynthSpec {
        seed: u64::from(seed),
        movement,
        speed_mps: typical_speed(movement),
        source_kind: SourceKind::Accelerometers,
        mount_rotation: if random_mount { MountRotation::Random } else { MountRotation::Identity },
        noise_std_mps2: 0.5,
        stance_limb: LimbPolicy::Right,
        ..SynthSpec::default()
    };
    generate_synthetic_trial(&spec, 0)
}

/// RGBA pixels (`size² × 4` bytes) of one encoded stance window.
pub fn encoded_rgba(seed: u32, movement_name: &str, alignment_name: &str, random_mount: bool, size: usize) -> Result<Vec<u8>, String> {
    if !(8..=512).contains(&size) {
        return Err("size must lie in 8..=512".into());
    }
    let trial = worn_trial(seed, movement(movement_name)?, random_mount);
    let force = trial.force.as_ref().ok_or("trial has no force track")?;
    let window = detect_stance_events(force, &ContactParams::default()).map_err(|e| e.to_string())?;
    let (aligned, _) = align_trial(&trial, alignment(alignment_name)?).map_err(|e| e.to_string())?;
    let cfg = EncodeConfig { size, ..EncodeConfig::default() };
    let (image, _) = encode_image(&aligned, &window, &cfg).map_err(|e| e.to_string())?;
    Ok(image.pixels.chunks_exact(3).flat_map(|p| [p[0], p[1], p[2], 255]).collect())
}

/// Ground reaction force of one synthetic trial with its detected events.
#[wasm_bindgen]
#[derive(Debug)]
pub struct ForceCurves {
    fx: Vec<f64>,
    fy: Vec<f64>,
    fz: Vec<f64>,
    rate_hz: f64,
    fs_frame: usize,
    to_frame: usize,
}

#[wasm_bindgen]
impl ForceCurves {
    #[wasm_bindgen(getter)]
    pub fn fx(&self) -> Vec<f64> {
        self.fx.clone()
    }
    #[wasm_bindgen(getter)]
    pub fn fy(&self) -> Vec<f64> {
        self.fy.clone()
    }
    #[wasm_bindgen(getter)]
    pub fn fz(&self) -> Vec<f64> {
        self.fz.clone()
    }
    #[wasm_bindgen(getter, js_name = rateHz)]
    pub fn rate_hz(&self) -> f64 {
        self.rate_hz
    }
    #[wasm_bindgen(getter, js_name = fsFrame)]
    pub fn fs_frame(&self) -> usize {
        self.fs_frame
    }
    #[wasm_bindgen(getter, js_name = toFrame)]
    pub fn to_frame(&self) -> usize {
        self.to_frame
    }
}

/// Force channels decimated by `step`, with FS/TO in decimated frames.
pub fn force_curves(seed: u32, movement_name: &str, speed_mps: f64, step: usize) -> Result<ForceCurves, String> {
    let movement = movement(movement_name)?;
    let spec = SynthSpec { seed: u64::from(seed), movement, speed_mps, ..SynthSpec::default() };
    spec.validate().map_err(|e| e.to_string())?;
    let trial = generate_synthetic_trial(&spec, 0);
    let force = trial.force.ok_or("trial has no force track")?;
    let window = detect_stance_events(&force, &ContactParams::default()).map_err(|e| e.to_string())?;
    let step = step.max(1);
    let pick = |c: usize| force.channels.iter().step_by(step).map(|f| f[c]).collect();
    Ok(ForceCurves {
        fx: pick(0),
        fy: pick(1),
        fz: pick(2),
        rate_hz: force.rate_hz / step as f64,
        fs_frame: window.fs_frame / step,
        to_frame: window.to_frame / step,
    })
}

/// Pelvis accelerations before and after alignment, interleaved `x, y, z`.
#[wasm_bindgen]
#[derive(Debug)]
pub struct AlignmentTraces {
    raw: Vec<f64>,
    aligned: Vec<f64>,
    rotation: Vec<f64>,
}

#[wasm_bindgen]
impl AlignmentTraces {
    #[wasm_bindgen(getter)]
    pub fn raw(&self) -> Vec<f64> {
        self.raw.clone()
    }
    #[wasm_bindgen(getter)]
    pub fn aligned(&self) -> Vec<f64> {
        self.aligned.clone()
    }
    /// Row-major 3×3 matrix applied to the pelvis track.
    #[wasm_bindgen(getter)]
    pub fn rotation(&self) -> Vec<f64> {
        self.rotation.clone()
    }
}

pub fn alignment_traces(seed: u32, movement_name: &str, alignment_name: &str) -> Result<AlignmentTraces, String> {
    let trial = worn_trial(seed, movement(movement_name)?, true);
    let (aligned, log) = align_trial(&trial, alignment(alignment_name)?).map_err(|e| e.to_string())?;
    let flat = |t: &TrialRecord| -> Result<Vec<f64>, String> {
        let track = t.sensor(SensorLocation::Pelvis).ok_or("no pelvis sensor")?;
        Ok(track.samples.iter().flatten().copied().collect())
    };
    let rotation = log
        .rotations
        .iter()
        .find(|r| r.location == SensorLocation::Pelvis)
        .map(|r| r.rotation.rows().iter().flatten().copied().collect())
        .unwrap_or_default();
    Ok(AlignmentTraces { raw: flat(&trial)?, aligned: flat(&aligned)?, rotation })
}

#[wasm_bindgen(js_name = encodeTrial)]
pub fn encode_trial_js(seed: u32, movement: &str, alignment: &str, random_mount: bool, size: usize) -> Result<Vec<u8>, JsError> {
    encoded_rgba(seed, movement, alignment, random_mount, size).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = forceCurves)]
pub fn force_curves_js(seed: u32, movement: &str, speed_mps: f64, step: usize) -> Result<ForceCurves, JsError> {
    force_curves(seed, movement, speed_mps, step).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = alignmentTraces)]
pub fn alignment_traces_js(seed: u32, movement: &str, alignment: &str) -> Result<AlignmentTraces, JsError> {
    alignment_traces(seed, movement, alignment).map_err(|e| JsError::new(&e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn norm_image_is_gray_and_pca_is_not() {
        let norm = encoded_rgba(3, "sidestep", "norm", true, 32).unwrap();
        assert_eq!(norm.len(), 32 * 32 * 4);
        assert!(norm.chunks_exact(4).all(|p| p[0] == p[1] && p[1] == p[2] && p[3] == 255));
        let pca = encoded_rgba(3, "sidestep", "pca", true, 32).unwrap();
        assert!(pca.chunks_exact(4).any(|p| p[0] != p[1]));
    }

    #[test]
    fn force_events_bracket_the_contact() {
        let f = force_curves(1, "run_moderate", 4.0, 4).unwrap();
        assert_eq!(f.rate_hz, 500.0);
        assert!(f.fs_frame < f.to_frame && f.to_frame < f.fz.len());
        assert!(f.fz[(f.fs_frame + f.to_frame) / 2] > 500.0);
        assert!(f.fz[0] < 20.0);
    }

    #[test]
    fn alignment_rotation_is_proper() {
        let t = alignment_traces(2, "run_fast", "pca").unwrap();
        assert_eq!(t.raw.len(), t.aligned.len());
        assert_eq!(t.rotation.len(), 9);
        let r = &t.rotation;
        let det = r[0] * (r[4] * r[8] - r[5] * r[7]) - r[1] * (r[3] * r[8] - r[5] * r[6]) + r[2] * (r[3] * r[7] - r[4] * r[6]);
        assert!((det - 1.0).abs() < 1e-9);
    }

    #[test]
    fn bad_names_are_reported() {
        assert!(encoded_rgba(0, "crawl", "pca", false, 32).unwrap_err().contains("crawl"));
        assert!(alignment_traces(0, "sidestep", "euler").unwrap_err().contains("euler"));
        assert!(encoded_rgba(0, "sidestep", "pca", false, 4).is_err());
    }
}
