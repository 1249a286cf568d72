use accel2grf::align::{align_trial, AlignmentMode};
use accel2grf::ingest::resample_uniform;
use accel2grf::simulate::{generate_synthetic_trial, virtual_imu_trial, MountRotation, SynthSpec, VirtualImuConfig};
use accel2grf::*;

fn spec(movement: MovementClass, source_kind: SourceKind) -> SynthSpec {
    SynthSpec {
        seed: 11,
        n_trials: 40,
        movement,
        speed_mps: 4.0,
        stance_ms: 260.0,
        speed_jitter_mps: 0.8,
        stance_jitter_ms: 30.0,
        source_kind,
        ..Default::default()
    }
}

/// Worn sensors with arbitrary mounts, aligned one rotation per sensor, land in
/// the same frame as marker-derived sensors aligned with the shared pelvis
/// rotation.
#[test]
fn per_sensor_alignment_matches_shared_marker_alignment() {
    let imu = VirtualImuConfig::default();
    let mut worst: f64 = 0.0;
    for movement in [MovementClass::RunModerate, MovementClass::Sidestep] {
        for index in 0..40 {
            let markers = generate_synthetic_trial(&spec(movement, SourceKind::Markers), index);
            let worn_spec = SynthSpec {
                mount_rotation: MountRotation::Random,
                noise_std_mps2: 0.5,
                ..spec(movement, SourceKind::Accelerometers)
            };
            let mut worn = generate_synthetic_trial(&worn_spec, index);
            for s in &mut worn.sensors {
                *s = resample_uniform(s, 250.0).unwrap();
            }
            let (a, log_a) = align_trial(&virtual_imu_trial(&markers, &imu).unwrap(), AlignmentMode::Pca).unwrap();
            let (b, log_b) = align_trial(&worn, AlignmentMode::Pca).unwrap();
            assert!(log_a.warnings.is_empty() && log_b.warnings.is_empty());
            for (x, y) in a.sensors.iter().zip(&b.sensors) {
                let num: f64 = x.samples.iter().zip(&y.samples).map(|(p, q)| (0..3).map(|k| (p[k] - q[k]).powi(2)).sum::<f64>()).sum();
                let den: f64 = x.samples.iter().map(|p| p.iter().map(|v| v * v).sum::<f64>()).sum();
                let rel = (num / den).sqrt();
                worst = worst.max(rel);
                assert!(rel < 0.25, "{movement:?} #{index} {}: relative difference {rel}", x.location);
            }
        }
    }
    eprintln!("worst relative difference {worst:.4}");
}
