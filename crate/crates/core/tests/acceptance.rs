//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

use accel2grf::align::{align_trial, euclidean_norm_align, pca_rotation_matrix, AlignmentMode, RotationMatrix3};
use accel2grf::encode::{decode_image_grid, encode_image, fit_output_pca, quantize_grid, EncodeConfig, Grid};
use accel2grf::eval::{bland_altman, pearson_r, rrmse};
use accel2grf::gait::{detect_stance_events, mirror_force_frame, mirror_left_to_right, normalize_stance, ContactParams, StanceWindow};
use accel2grf::model::{grad_check_with_fault, init_network, loss_and_gradient, BackwardFault, NetworkSpec, WeightBundle};
use accel2grf::pipeline::{self, ExperimentConfig, LimbSubset, MovementFilter, PipelineConfig, SplitMode};
use accel2grf::simulate::{double_differentiate, generate_synthetic_trial, LimbPolicy, MountRotation, SynthSpec, VirtualImuConfig};
use accel2grf::{ForceTrack, MovementClass, SensorLocation, SensorTrack, SourceKind, TrackKind, Vec3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::f64::consts::PI;
use std::fs;
use std::path::Path;
use std::time::{Duration, Instant};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn check(id: usize, name: &str, budget: Option<Duration>, f: impl FnOnce() -> Outcome) -> bool {
    let start = Instant::now();
    let mut o = f();
    let elapsed = start.elapsed();
    if let Some(b) = budget {
        if elapsed > b {
            o.pass = false;
            o.detail += &format!("; over the {:.0} s budget", b.as_secs_f64());
        }
    }
    let verdict = if o.pass { "PASS" } else { "FAIL" };
    println!("criterion {id:>2} {verdict}  {name}  [{:.2} s]  {}", elapsed.as_secs_f64(), o.detail);
    o.pass
}

// ---------------------------------------------------------------------------
// 1

fn differentiation() -> Outcome {
    let no_gravity = VirtualImuConfig { include_gravity: false, ..Default::default() };
    let rate = 250.0;
    let h = 1.0 / rate;

    let quad = SensorTrack::new(
        SensorLocation::Pelvis,
        rate,
        TrackKind::Position,
        (0..50).map(|i| [0.0, 0.0, (i as f64 * h).powi(2)]).collect(),
    );
    let a = double_differentiate(&quad, &no_gravity).unwrap();
    let quad_err = a.samples.iter().map(|s| (s[2] - 2.0).abs().max(s[0].abs()).max(s[1].abs())).fold(0.0, f64::max);

    let w = 2.0 * PI * 2.0;
    let sine = SensorTrack::new(
        SensorLocation::Pelvis,
        rate,
        TrackKind::Position,
        (0..250).map(|i| [0.0, (w * i as f64 * h).sin(), 0.0]).collect(),
    );
    let a = double_differentiate(&sine, &no_gravity).unwrap();
    let max_a = w * w;
    // central stencil truncation h²/12·max|p''''|; the one-sided endpoint
    // stencil 2p0 − 5p1 + 4p2 − p3 has constant 11/12
    let central = h * h / 12.0 * w.powi(4) / max_a;
    let endpoint = 11.0 * h * h / 12.0 * w.powi(4) / max_a;
    let n = a.samples.len();
    let mut worst_inner: f64 = 0.0;
    let mut worst_end: f64 = 0.0;
    for (i, s) in a.samples.iter().enumerate() {
        let rel = (s[1] + w * w * (w * i as f64 * h).sin()).abs() / max_a;
        if i == 0 || i == n - 1 {
            worst_end = worst_end.max(rel);
        } else {
            worst_inner = worst_inner.max(rel);
        }
    }
    let pass = quad_err <= 1e-12 && worst_inner <= central && worst_end <= endpoint;
    outcome(
        pass,
        format!(
            "quadratic max err {quad_err:.1e} (<= 1e-12); sine interior rel err {worst_inner:.3e} (<= {central:.3e}), endpoints {worst_end:.3e} (<= {endpoint:.3e})"
        ),
    )
}

// ---------------------------------------------------------------------------
// 2

fn random_rotation(rng: &mut ChaCha8Rng) -> RotationMatrix3 {
    loop {
        let q: [f64; 4] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
        if q.iter().map(|v| v * v).sum::<f64>() > 1e-3 {
            return RotationMatrix3::from_quaternion(q[0], q[1], q[2], q[3]);
        }
    }
}

fn accel_track(samples: Vec<Vec3>) -> SensorTrack {
    SensorTrack::new(SensorLocation::Pelvis, 250.0, TrackKind::Acceleration, samples)
}

fn alignment() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut norm_err: f64 = 0.0;
    let mut orth_err: f64 = 0.0;
    let mut det_err: f64 = 0.0;
    let mut min_dot: f64 = 1.0;
    for _ in 0..1000 {
        let r0 = random_rotation(&mut rng);

        let n = rng.random_range(8..80);
        let data: Vec<Vec3> = (0..n).map(|_| std::array::from_fn(|_| rng.random_range(-30.0..30.0))).collect();
        let a = euclidean_norm_align(&accel_track(data.clone()));
        let b = euclidean_norm_align(&accel_track(data.iter().map(|p| r0.apply(*p)).collect()));
        for (x, y) in a.samples.iter().zip(&b.samples) {
            norm_err = norm_err.max((x[0] - y[0]).abs());
        }

        // covariance exactly diag(vx, vy, vz) with distinct variances, a
        // forward drift and gravity: the aligned frame is the lab frame
        let var = [rng.random_range(2.0..10.0), rng.random_range(50.0..150.0), rng.random_range(0.01..0.5)];
        let s = var.map(f64::sqrt);
        let mut cube = Vec::new();
        for sx in [-1.0, 1.0] {
            for sy in [-1.0, 1.0] {
                for sz in [-1.0, 1.0] {
                    cube.push([sx * s[0], sy * s[1] + 0.01, sz * s[2] + 9.81]);
                }
            }
        }
        let mounted: Vec<Vec3> = cube.iter().map(|p| r0.apply(*p)).collect();
        let r = pca_rotation_matrix(&accel_track(mounted)).unwrap();
        orth_err = orth_err.max(r.orthonormality_error());
        det_err = det_err.max((r.determinant() - 1.0).abs());
        let recovered = r.compose(&r0);
        for k in 0..3 {
            min_dot = min_dot.min(recovered.matrix()[(k, k)]);
        }
    }
    let pass = norm_err <= 1e-12 && orth_err <= 1e-9 && det_err <= 1e-9 && min_dot >= 1.0 - 1e-6;
    outcome(
        pass,
        format!(
            "1000 cases: NORM invariance {norm_err:.1e} (<= 1e-12); orthonormality {orth_err:.1e}, |det-1| {det_err:.1e} (<= 1e-9); min axis dot {min_dot:.9} (>= 1-1e-6)"
        ),
    )
}

// ---------------------------------------------------------------------------
// 3

fn gait() -> Outcome {
    let params = ContactParams::default();
    let mut rng = ChaCha8Rng::seed_from_u64(3);

    let mut rect_ok = 0;
    for _ in 0..200 {
        let fs = rng.random_range(20..500);
        let len = rng.random_range(params.min_contact_frames..800);
        let total = fs + len + rng.random_range(params.min_contact_frames..300);
        let height = rng.random_range(100.0..2500.0);
        let channels = (0..total)
            .map(|i| {
                let fz = if (fs..fs + len).contains(&i) { height } else { 0.0 };
                [0.0, 0.0, fz, 0.0, 0.0, 0.0]
            })
            .collect();
        let w = detect_stance_events(&ForceTrack::new(2000.0, channels), &params).unwrap();
        rect_ok += usize::from(w.fs_frame == fs && w.to_frame == fs + len);
    }

    let movements = [MovementClass::RunSlow, MovementClass::RunModerate, MovementClass::RunFast, MovementClass::Sidestep];
    let mut worst_frames = 0usize;
    let mut bump_trials = 0;
    for (m, movement) in movements.into_iter().enumerate() {
        let speed = match movement {
            MovementClass::RunSlow => 3.0,
            MovementClass::RunFast => 6.0,
            MovementClass::Sidestep => 3.0,
            _ => 4.5,
        };
        let spec = SynthSpec { seed: 30 + m as u64, n_trials: 25, movement, speed_mps: speed, stance_jitter_ms: 60.0, ..SynthSpec::default() };
        for i in 0..25 {
            let t = generate_synthetic_trial(&spec, i);
            let oracle = t.oracle.as_ref().unwrap();
            let w = detect_stance_events(t.force.as_ref().unwrap(), &params).unwrap();
            worst_frames = worst_frames.max(w.fs_frame.abs_diff(oracle.fs_frame)).max(w.to_frame.abs_diff(oracle.to_frame));
            bump_trials += 1;
        }
    }

    let mut involution_ok = true;
    let left = SynthSpec { seed: 33, n_trials: 10, stance_limb: LimbPolicy::Left, ..SynthSpec::default() };
    for i in 0..10 {
        let t = generate_synthetic_trial(&left, i);
        let once = mirror_left_to_right(&t).unwrap();
        involution_ok &= once != t && mirror_left_to_right(&once).unwrap() == t;
    }
    for _ in 0..1000 {
        let f: [f64; 6] = std::array::from_fn(|_| rng.random_range(-1e3..1e3));
        involution_ok &= mirror_force_frame(mirror_force_frame(f)) == f;
    }

    let mut endpoints_ok = true;
    for _ in 0..200 {
        let n = rng.random_range(20..400);
        let series: Vec<[f64; 3]> = (0..n).map(|_| std::array::from_fn(|_| rng.random_range(-50.0..50.0))).collect();
        let fs = rng.random_range(0..n / 2);
        let to = rng.random_range(fs + 1..n);
        // window at the 2000 Hz force rate over a 250 Hz track
        let window = StanceWindow::new(fs * 8, to * 8, 2000.0);
        let points = rng.random_range(2..150);
        let out = normalize_stance(&series, 250.0, &window, points).unwrap();
        endpoints_ok &= out.len() == points && out[0] == series[fs] && out[points - 1] == series[to];
    }

    let pass = rect_ok == 200 && worst_frames <= 2 && bump_trials == 100 && involution_ok && endpoints_ok;
    outcome(
        pass,
        format!(
            "rectangular exact {rect_ok}/200; bump FS/TO worst {worst_frames} frames over {bump_trials} trials (<= 2); mirror involution {}; normalization endpoints {}",
            if involution_ok { "bit-exact" } else { "broken" },
            if endpoints_ok { "exact" } else { "inexact" }
        ),
    )
}

// ---------------------------------------------------------------------------
// 4

fn encode_round_trip() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst_ratio: f64 = 0.0;
    for _ in 0..1000 {
        let rows = rng.random_range(2..120);
        let scale: [f64; 3] = std::array::from_fn(|_| 10f64.powf(rng.random_range(-2.0..2.0)));
        let offset: [f64; 3] = std::array::from_fn(|_| rng.random_range(-20.0..20.0));
        let data: Vec<[f64; 3]> =
            (0..rows * 5).map(|_| std::array::from_fn(|c| offset[c] + scale[c] * rng.random_range(-1.0..1.0))).collect();
        let grid = Grid { rows, cols: 5, data };
        let (bytes, scaling) = quantize_grid(&grid, None);
        let back = decode_image_grid(&bytes, &scaling);
        for c in 0..3 {
            let (lo, hi) = scaling[c];
            let half_step = (hi - lo) / 510.0;
            for (a, b) in grid.data.iter().zip(&back.data) {
                worst_ratio = worst_ratio.max((a[c] - b[c]).abs() / half_step);
            }
        }
    }

    let spec = SynthSpec {
        seed: 40,
        n_trials: 6,
        source_kind: SourceKind::Accelerometers,
        mount_rotation: MountRotation::Random,
        noise_std_mps2: 0.5,
        ..SynthSpec::default()
    };
    let cfg = EncodeConfig { size: 64, ..EncodeConfig::default() };
    let mut grayscale = 0;
    for i in 0..6 {
        let t = generate_synthetic_trial(&spec, i);
        let w = detect_stance_events(t.force.as_ref().unwrap(), &ContactParams::default()).unwrap();
        let (aligned, _) = align_trial(&t, AlignmentMode::Norm).unwrap();
        let (img, _) = encode_image(&aligned, &w, &cfg).unwrap();
        grayscale += usize::from(img.is_grayscale());
    }

    let flat = Grid { rows: 7, cols: 5, data: (0..35).map(|i| [3.5, i as f64, -1.0]).collect() };
    let (bytes, _) = quantize_grid(&flat, None);
    let degenerate_zero = bytes.data.iter().all(|b| b[0] == 0 && b[2] == 0) && bytes.data.iter().any(|b| b[1] == 255);

    let pass = worst_ratio <= 1.0 && grayscale == 6 && degenerate_zero;
    outcome(
        pass,
        format!(
            "1000 grids: worst error {worst_ratio:.4} half-steps (<= 1); NORM images grayscale {grayscale}/6; degenerate channels -> 0 {degenerate_zero}"
        ),
    )
}

// ---------------------------------------------------------------------------
// 5

fn gram_schmidt(rng: &mut ChaCha8Rng, n: usize, dim: usize) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::new();
    while basis.len() < n {
        let mut v: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        for b in &basis {
            let d: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= d * y);
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        basis.push(v.into_iter().map(|x| x / norm).collect());
    }
    basis
}

fn analytic_k(variances: &[f64], keep: f64) -> usize {
    let total: f64 = variances.iter().sum();
    let mut cum = 0.0;
    for (k, v) in variances.iter().enumerate() {
        cum += v;
        if cum >= keep * total {
            return k + 1;
        }
    }
    variances.len()
}

fn output_pca() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let dim = 606;
    let targets: Vec<Vec<f64>> = (0..24).map(|_| (0..dim).map(|_| rng.random_range(-2.0..2.0)).collect()).collect();
    let pca = fit_output_pca(&targets, 1.0, 64).unwrap();
    let mut identity_err: f64 = 0.0;
    for t in &targets {
        let back = pca.reconstruct(&pca.project(t).unwrap()).unwrap();
        identity_err = identity_err.max(back.iter().zip(t).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max));
    }

    // ±sqrt(3v) along three orthonormal directions gives variances exactly v
    let variances: [f64; 3] = [100.0, 10.0, 1.0];
    let dirs = gram_schmidt(&mut rng, 3, dim);
    let mut spectrum = Vec::new();
    for (v, d) in variances.iter().zip(&dirs) {
        for sign in [-1.0, 1.0] {
            spectrum.push(d.iter().map(|x| sign * (3.0 * v).sqrt() * x).collect::<Vec<f64>>());
        }
    }
    let mut k_ok = true;
    let mut ks = Vec::new();
    for keep in [0.9, 0.95, 0.995, 0.999] {
        let k = fit_output_pca(&spectrum, keep, 64).unwrap().k();
        k_ok &= k == analytic_k(&variances, keep);
        ks.push(format!("{keep}->{k}"));
    }
    let pass = identity_err <= 1e-9 && k_ok && pca.k() == 23;
    outcome(
        pass,
        format!(
            "full rank K={} identity err {identity_err:.1e} (<= 1e-9); constructed spectrum 100/10/1 K [{}] matches analytic {k_ok}",
            pca.k(),
            ks.join(", ")
        ),
    )
}

// ---------------------------------------------------------------------------
// 6

fn draw_batch(seed: u64) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inputs = (0..4).map(|_| (0..3 * 12 * 12).map(|_| rng.random::<f64>()).collect()).collect();
    let targets = (0..4).map(|_| (0..3).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
    (inputs, targets)
}

/// Max relative error of the analytic gradient against central differences.
fn finite_difference_error(bundle: &WeightBundle, inputs: &[Vec<f64>], targets: &[Vec<f64>], h: f64) -> f64 {
    let (_, analytic) = loss_and_gradient(bundle, inputs, targets);
    let mut probe = bundle.clone();
    let mut worst: f64 = 0.0;
    for i in 0..bundle.params.len() {
        let orig = probe.params[i];
        probe.params[i] = orig + h;
        let (up, _) = loss_and_gradient(&probe, inputs, targets);
        probe.params[i] = orig - h;
        let (down, _) = loss_and_gradient(&probe, inputs, targets);
        probe.params[i] = orig;
        let numeric = (up - down) / (2.0 * h);
        worst = worst.max((analytic[i] - numeric).abs() / analytic[i].abs().max(numeric.abs()).max(1e-8));
    }
    worst
}

fn gradient_check() -> Outcome {
    let spec = NetworkSpec { input_size: 12, conv_widths: [4, 6], dense_width: 8, k_outputs: 3, ..NetworkSpec::default() };
    let bundle = init_network(&spec, 0, None).unwrap();
    let h = 1e-3;
    let (inputs, targets) = draw_batch(0);
    let worst = finite_difference_error(&bundle, &inputs, &targets, h);
    let controls: Vec<f64> = [BackwardFault::IgnoreHiddenMask, BackwardFault::DropHeadBias]
        .into_iter()
        .map(|f| grad_check_with_fault(&bundle, &inputs, &targets, h, f))
        .collect();
    let detected = controls.iter().all(|&e| e > 1e-2);

    // other batches: a ±h step can cross a ReLU or max-pool switch, where the
    // central difference is not a derivative; a smaller step separates that
    // from a backward-pass error
    let sweep: Vec<(f64, f64)> =
        (1..10).map(|s| draw_batch(s)).map(|(x, t)| (finite_difference_error(&bundle, &x, &t, h), finite_difference_error(&bundle, &x, &t, 1e-5))).collect();
    let coarse_ok = sweep.iter().filter(|(c, _)| *c <= 1e-4).count();
    let fine_worst = sweep.iter().map(|(_, f)| *f).fold(0.0, f64::max);
    outcome(
        worst <= 1e-4 && detected,
        format!(
            "{} params, seed 0 batch max rel err {worst:.2e} (<= 1e-4); corrupted backward passes {:.2e}, {:.2e} (> 1e-2); batches 1-9: {coarse_ok}/9 within 1e-4 at h=1e-3, worst {fine_worst:.1e} at h=1e-5",
            bundle.params.len(),
            controls[0],
            controls[1]
        ),
    )
}

// ---------------------------------------------------------------------------
// 7 and 10

fn benchmark_config() -> PipelineConfig {
    let run = |seed, n, kind: SourceKind| SynthSpec {
        seed,
        n_trials: n,
        movement: MovementClass::RunModerate,
        speed_mps: 4.0,
        speed_jitter_mps: 0.8,
        stance_jitter_ms: 30.0,
        source_kind: kind,
        ..SynthSpec::default()
    };
    let side = |seed, n, kind| SynthSpec { movement: MovementClass::Sidestep, speed_mps: 3.0, speed_jitter_mps: 0.5, ..run(seed, n, kind) };
    let worn = |s: SynthSpec| SynthSpec { mount_rotation: MountRotation::Random, noise_std_mps2: 0.5, ..s };

    let mut cfg = PipelineConfig::default();
    cfg.experiment_id = "benchmark".into();
    cfg.seed = 7;
    cfg.synth.specs = vec![
        run(101, 200, SourceKind::Markers),
        side(102, 200, SourceKind::Markers),
        worn(run(201, 30, SourceKind::Accelerometers)),
        worn(side(202, 30, SourceKind::Accelerometers)),
    ];
    cfg.split.mode = SplitMode::SourceKind;
    cfg.alignment = AlignmentMode::Pca;
    cfg.experiments = vec![ExperimentConfig { id: "combined".into(), movement: MovementFilter::All, stance_limb: LimbSubset::Combined }];
    cfg.train.epochs = 50;
    cfg
}

fn run_benchmark(cfg: &PipelineConfig, root: &Path) -> Result<Vec<u8>, pipeline::PipelineError> {
    pipeline::synth(cfg, &root.join("corpus"))?;
    pipeline::prepare(cfg, &root.join("corpus"), &root.join("prepared"))?;
    pipeline::train(cfg, &root.join("prepared"), &root.join("models"))?;
    pipeline::predict(cfg, &root.join("models"), &root.join("prepared"), &root.join("predictions"))?;
    pipeline::evaluate(cfg, &root.join("predictions"), &root.join("prepared"), &root.join("evaluation"))?;
    Ok(fs::read(root.join("evaluation").join("report.csv")).expect("report written"))
}

fn benchmark(report: &Result<Vec<u8>, String>, cfg: &PipelineConfig) -> Outcome {
    let bytes = match report {
        Ok(b) => b,
        Err(e) => return outcome(false, format!("pipeline failed: {e}")),
    };
    let text = String::from_utf8_lossy(bytes);
    let row: Vec<&str> = text.lines().nth(1).unwrap_or_default().split(',').collect();
    let field = |i: usize| row.get(i).and_then(|v| v.parse::<f64>().ok()).unwrap_or(f64::NAN);
    let (n_train, n_test) = (field(4), field(5));
    let (r_fz, r_fmean, rrmse_fz) = (field(8), field(12), field(16));
    let pass = n_train == 400.0 && n_test == 60.0 && r_fz >= 0.90 && r_fmean >= 0.80 && rrmse_fz <= 20.0;
    outcome(
        pass,
        format!(
            "{n_train} train / {n_test} test, {} epochs: r(Fz) {r_fz:.4} (>= 0.90), r(F_mean) {r_fmean:.4} (>= 0.80), rRMSE(Fz) {rrmse_fz:.2}% (<= 20%); r Fx {:.3} Fy {:.3} Mx {:.3} My {:.3} Mz {:.3}",
            cfg.train.epochs,
            field(6),
            field(7),
            field(9),
            field(10),
            field(11)
        ),
    )
}

// ---------------------------------------------------------------------------
// 8

fn cascade() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let base = |id: &str, specs: Vec<SynthSpec>| {
        let mut cfg = PipelineConfig::default();
        cfg.experiment_id = "cascade".into();
        cfg.seed = 8;
        cfg.synth.specs = specs;
        cfg.split.test_fraction = 0.2;
        cfg.experiments = vec![ExperimentConfig { id: id.into(), movement: MovementFilter::All, stance_limb: LimbSubset::Combined }];
        cfg.train.epochs = 12;
        cfg.train.val_fraction = 0.2;
        cfg
    };
    // parent: sidesteps from one generator seed; child: runs from another
    let parent_cfg = base(
        "parent",
        vec![SynthSpec { seed: 801, n_trials: 120, movement: MovementClass::Sidestep, speed_mps: 3.0, speed_jitter_mps: 0.5, ..SynthSpec::default() }],
    );
    let child_cfg = base("child", vec![SynthSpec { seed: 802, n_trials: 120, speed_jitter_mps: 0.8, ..SynthSpec::default() }]);

    let run = || -> Result<(Vec<Option<f64>>, Vec<Option<f64>>), pipeline::PipelineError> {
        pipeline::synth(&parent_cfg, &root.join("parent_corpus"))?;
        pipeline::prepare(&parent_cfg, &root.join("parent_corpus"), &root.join("parent_prepared"))?;
        pipeline::train(&parent_cfg, &root.join("parent_prepared"), &root.join("parent_models"))?;

        pipeline::synth(&child_cfg, &root.join("child_corpus"))?;
        pipeline::prepare(&child_cfg, &root.join("child_corpus"), &root.join("child_prepared"))?;
        let cold = pipeline::train(&child_cfg, &root.join("child_prepared"), &root.join("cold"))?;
        let mut warm_cfg = child_cfg.clone();
        warm_cfg.cascade.parent = Some(root.join("parent_models").join("parent"));
        let warm = pipeline::train(&warm_cfg, &root.join("child_prepared"), &root.join("warm"))?;
        let losses = |b: &WeightBundle| b.history.iter().map(|r| r.val_loss).collect::<Vec<_>>();
        Ok((losses(&cold[0]), losses(&warm[0])))
    };
    let (cold, warm) = match run() {
        Ok(v) => v,
        Err(e) => return outcome(false, format!("pipeline failed: {e}")),
    };
    let Some(Some(target)) = cold.last().copied() else {
        return outcome(false, "cold run recorded no validation loss");
    };
    let reached = warm.iter().position(|v| v.is_some_and(|v| v <= target)).map(|i| i + 1);
    let epochs = cold.len();
    let pass = reached.is_some_and(|e| e <= epochs);
    outcome(
        pass,
        format!(
            "cold final val loss {target:.5} after {epochs} epochs; warm start reaches it at epoch {} (<= {epochs}); warm first/last val {:.5}/{:.5}, cold first {:.5}",
            reached.map_or("never".into(), |e| e.to_string()),
            warm[0].unwrap_or(f64::NAN),
            warm.last().copied().flatten().unwrap_or(f64::NAN),
            cold[0].unwrap_or(f64::NAN)
        ),
    )
}

// ---------------------------------------------------------------------------
// 9

fn metrics() -> Outcome {
    let r = pearson_r(&[vec![1.0, 2.0, 3.0]], &[vec![1.0, 2.0, 4.0]]).unwrap();
    let r_err = (r - 9.0 / 84f64.sqrt()).abs();

    let truth: Vec<f64> = (0..100).map(|i| (2.0 * PI * i as f64 / 100.0).sin()).collect();
    let pred: Vec<f64> = truth.iter().map(|v| v + 0.2).collect();
    let e = rrmse(&[pred], &[truth.clone()]).unwrap();
    let rrmse_err = (e - 10.0).abs();

    let same = bland_altman(&[truth.clone()], &[truth.clone()]).unwrap().summary;
    let same_err = [same.bias, same.loa_low, same.loa_high].iter().map(|v| v.abs()).fold(0.0, f64::max);
    let c = 0.75;
    let shifted = bland_altman(&[truth.iter().map(|v| v + c).collect()], &[truth]).unwrap().summary;
    let shift_err = [shifted.bias - c, shifted.loa_low - c, shifted.loa_high - c, shifted.sd].iter().map(|v| v.abs()).fold(0.0, f64::max);

    let pass = r_err <= 1e-9 && rrmse_err <= 1e-9 && same_err <= 1e-9 && shift_err <= 1e-9;
    outcome(
        pass,
        format!(
            "r {r:.10} vs 9/sqrt(84) err {r_err:.1e}; rRMSE {e:.10}% err {rrmse_err:.1e}; Bland-Altman identical err {same_err:.1e}, shifted err {shift_err:.1e} (all <= 1e-9)"
        ),
    )
}

fn main() {
    let mut results = Vec::new();
    results.push(check(1, "double differentiation against analytic derivatives", Some(Duration::from_secs(1)), differentiation));
    results.push(check(2, "alignment over 1000 random rotations", Some(Duration::from_secs(10)), alignment));
    results.push(check(3, "gait events, mirroring and stance normalization", None, gait));
    results.push(check(4, "image encode/decode round trip", None, encode_round_trip));
    results.push(check(5, "output PCA identity and component count", None, output_pca));
    results.push(check(6, "network gradient against finite differences", Some(Duration::from_secs(60)), gradient_check));

    let cfg = benchmark_config();
    let first = tempfile::tempdir().unwrap();
    let started = Instant::now();
    let report = run_benchmark(&cfg, first.path()).map_err(|e| e.to_string());
    let bench_time = started.elapsed();
    results.push(check(7, "end-to-end synthetic benchmark", Some(Duration::from_secs(15 * 60)), || {
        let mut o = benchmark(&report, &cfg);
        o.detail += &format!("; pipeline {:.0} s", bench_time.as_secs_f64());
        if bench_time > Duration::from_secs(15 * 60) {
            o.pass = false;
        }
        o
    }));
    results.push(check(8, "cascade warm start", None, cascade));
    results.push(check(9, "metric reference values", None, metrics));
    results.push(check(10, "benchmark rerun reproduces report.csv", None, || {
        let second = tempfile::tempdir().unwrap();
        let again = run_benchmark(&cfg, second.path()).map_err(|e| e.to_string());
        match (&report, &again) {
            (Ok(a), Ok(b)) => {
                let same_manifest = fs::read(first.path().join("evaluation/manifest.json")).ok()
                    == fs::read(second.path().join("evaluation/manifest.json")).ok();
                outcome(a == b && same_manifest, format!("report.csv {} bytes, identical {}; evaluation manifest identical {same_manifest}", a.len(), a == b))
            }
            (Err(e), _) | (_, Err(e)) => outcome(false, format!("pipeline failed: {e}")),
        }
    }));

    let passed = results.iter().filter(|&&p| p).count();
    println!("acceptance: {passed}/{} criteria passed", results.len());
    if passed != results.len() {
        std::process::exit(1);
    }
}
