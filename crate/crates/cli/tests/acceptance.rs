//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any failure.

use std::f64::consts::FRAC_PI_2;
use std::time::Instant;

use nalgebra::{DMatrix, DVector, Matrix3, SVector, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use preobs_core::ltv::{sample_measurements, simulate, Harmonic, LtvModel, MatrixFn, SignalTrajectory};
use preobs_core::manifold::batch::preintegration_jacobians;
use preobs_core::manifold::imu::{preintegrate_keyframes, ImuBias, PreintMethod};
use preobs_core::manifold::kinematics::{simulate_rigid_body, RigidBodySpec};
use preobs_core::manifold::landmarks::{default_landmarks, sample_landmark_observations, LandmarkMode};
use preobs_core::manifold::pebo::{pebo_jacobians, run_manifold_extension, PeboOptions, Vector9};
use preobs_core::manifold::{BatchMode, ExtendedPose, PreintegrationOptions};
use preobs_core::observer::{check_uco, observer_step, run_observer, KeyframeMeasurement, ObserverState};
use preobs_core::oracle::expm;
use preobs_core::preint::{preintegrate_segment, PreintegralSegment};
use preobs_core::so3::{exp, Rotation};
use preobs_core::verify::{
    extension_identities, manifold_limit, mid_interval_identity, pebo_batch_identity, random_ltv_case,
    random_manifold_case, random_rigid_body, rotation_chain_identity, EuclidCase,
};
use preobs_core::TimeGrid;

use preobs::scenario::{self, BUNDLED};
use preobs::{cmd_estimate, cmd_montecarlo, cmd_simulate, cmd_verify, Options};

struct Verdict {
    passed: bool,
    detail: String,
}

fn verdict(passed: bool, detail: String) -> Verdict {
    Verdict { passed, detail }
}

fn ltv_cases() -> Vec<EuclidCase> {
    let grid = TimeGrid::uniform(0.0, 1e-3, 10_000, 500).unwrap();
    (0..20).map(|i| random_ltv_case(100 + i, 1 + (i as usize % 6), &grid).unwrap()).collect()
}

fn criterion_1(cases: &[EuclidCase]) -> Verdict {
    let start = Instant::now();
    let dev = cases.iter().map(|c| extension_identities(c).unwrap().0).fold(0.0, f64::max);
    let secs = start.elapsed().as_secs_f64();
    verdict(dev <= 1e-8 && secs < 10.0, format!("max rel dev {dev:.2e} <= 1e-8, runtime {secs:.2} s < 10 s"))
}

fn criterion_2(cases: &[EuclidCase]) -> Verdict {
    let dev = cases.iter().map(|c| mid_interval_identity(c).unwrap()).fold(0.0, f64::max);
    verdict(dev <= 1e-8, format!("max rel dev {dev:.2e} <= 1e-8"))
}

fn criterion_3(cases: &[EuclidCase]) -> Verdict {
    let dev = cases.iter().map(|c| pebo_batch_identity(c).unwrap()).fold(0.0, f64::max);
    verdict(dev <= 1e-8, format!("max keyframe gap {dev:.2e} <= 1e-8"))
}

fn criterion_4() -> Verdict {
    let grid = TimeGrid::uniform(0.0, 1e-3, 5000, 500).unwrap();
    let dev = (0..10).map(|i| rotation_chain_identity(&random_rigid_body(200 + i), &grid).unwrap()).fold(0.0, f64::max);
    verdict(dev <= 1e-7, format!("max log-distance {dev:.2e} rad <= 1e-7"))
}

fn criterion_5() -> Verdict {
    let grid = TimeGrid::uniform(0.0, 1e-2, 500, 50).unwrap();
    let mut ok = true;
    let mut parts = Vec::new();
    for seed in [301, 302, 303] {
        let r = manifold_limit(&random_manifold_case(seed, &grid)).unwrap();
        let gaps: Vec<f64> = r.sweep.iter().map(|p| p.1).collect();
        let monotone = gaps.windows(2).all(|w| w[1] < w[0]);
        ok &= monotone && gaps[2] < 1e-4;
        parts.push(format!("[{:.1e} {:.1e} {:.1e}]", gaps[0], gaps[1], gaps[2]));
    }
    verdict(ok, format!("position gaps {} strictly decreasing, last < 1e-4", parts.join(" ")))
}

fn oscillator(c: DMatrix<f64>) -> LtvModel {
    let a = MatrixFn::Sinusoid {
        offset: DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -1.0, -0.2]),
        harmonics: vec![Harmonic { amplitude: DMatrix::from_row_slice(2, 2, &[0.0, 0.0, -0.5, 0.0]), freq: 1.0, phase: 0.0 }],
    };
    let p = c.nrows();
    LtvModel::new(a, MatrixFn::Constant(DMatrix::from_column_slice(2, 1, &[0.0, 1.0])), MatrixFn::Constant(c), MatrixFn::zeros(p, 1)).unwrap()
}

/// Keyframes to settle to 1e-3 of the initial error, and the smallest
/// Gramian eigenvalue over all windows.
fn observer_run(model: &LtvModel, grid: &TimeGrid) -> (Option<usize>, f64, f64) {
    let x0 = DVector::from_vec(vec![1.0, 0.0]);
    let u = SignalTrajectory::sample(grid, |t| DVector::from_element(1, (0.7 * t).sin()));
    let truth = simulate(model, &x0, &u).unwrap();
    let meas = sample_measurements(model, &truth, &u, &DMatrix::zeros(1, 1), &DMatrix::zeros(model.p, model.p), 0).unwrap();
    let guess = &x0 + DVector::from_vec(vec![6.0, 8.0]);
    let eye = DMatrix::<f64>::identity(2, 2);
    let r = DMatrix::<f64>::identity(model.p, model.p) * 1e-2;
    let run = run_observer(model, &meas.u, &meas, &guess, &(&eye * 100.0), &(&eye * 1e-6), &r, Some(&truth)).unwrap();
    let e0 = run.log[0].error_norm.unwrap();
    let transitions: Vec<_> = run.segments.iter().map(|s| s.f.clone()).collect();
    let outputs: Vec<_> = grid.keyframes().iter().map(|&i| model.c(grid.time(i))).collect();
    let uco = check_uco(&transitions, &outputs, 2, 1e-6).unwrap();
    let lmin = uco.iter().map(|g| g.min_eigenvalue).fold(f64::INFINITY, f64::min);
    (run.settling_keyframe(1e-3), lmin, e0)
}

fn criterion_6() -> Verdict {
    let model = oscillator(DMatrix::from_row_slice(1, 2, &[1.0, 0.0]));
    let uniform = TimeGrid::uniform(0.0, 1e-3, 12_000, 200).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(60);
    let mut kf = vec![0usize];
    loop {
        let next = kf.last().unwrap() + rng.gen_range(50..=500);
        if next > 20_000 {
            break;
        }
        kf.push(next);
    }
    let asynchronous = TimeGrid::new(0.0, 1e-3, 20_000, kf).unwrap();
    let (s1, l1, e1) = observer_run(&model, &uniform);
    let (s2, l2, e2) = observer_run(&model, &asynchronous);
    let blind = oscillator(DMatrix::zeros(1, 2));
    let transitions: Vec<_> =
        uniform.intervals().enumerate().map(|(k, (a, b))| {
            let u = SignalTrajectory::constant(&uniform, DVector::zeros(1));
            preintegrate_segment(&blind, &u, k, a, b).unwrap().f
        }).collect();
    let outputs = vec![DMatrix::zeros(1, 2); transitions.len() + 1];
    let l0 = check_uco(&transitions, &outputs, 2, 1e-6).unwrap().iter().map(|g| g.min_eigenvalue).fold(f64::INFINITY, f64::min);
    let settled = |s: Option<usize>| s.is_some_and(|k| k <= 50);
    let ok = settled(s1) && settled(s2) && (e1 - 10.0).abs() < 1e-9 && (e2 - 10.0).abs() < 1e-9 && l1 >= 1e-6 && l2 >= 1e-6 && l0 < 1e-6;
    verdict(ok, format!(
        "settled at keyframe {s1:?} (uniform), {s2:?} (async) <= 50; lambda_min(W_O) {l1:.2e}, {l2:.2e} >= 1e-6; C = 0 gives {l0:.1e}"
    ))
}

fn criterion_7() -> Verdict {
    let seg = PreintegralSegment {
        k: 0,
        f: DMatrix::identity(1, 1),
        v: DVector::zeros(1),
        t_start: 0.0,
        t_end: 1.0,
        start: 0,
        end: 1,
    };
    let state = ObserverState { x: DVector::zeros(1), p: DMatrix::identity(1, 1), k: 0 };
    let y = DVector::from_element(1, 2.0);
    let (u, c, d) = (DVector::zeros(1), DMatrix::identity(1, 1), DMatrix::zeros(1, 1));
    let out = observer_step(&state, &seg, KeyframeMeasurement { y: &y, u: &u, c: &c, d: &d }, &DMatrix::zeros(1, 1), &DMatrix::identity(1, 1)).unwrap();
    let (p1, k1, x1) = (out.state.p[(0, 0)], out.gain[(0, 0)], out.state.x[0]);
    let dev = (p1 - 0.5).abs().max((k1 - 0.5).abs()).max((x1 - 1.0).abs());
    verdict(dev <= 1e-14, format!("P1 = {p1}, K1 = {k1}, x1 = {x1}; max dev {dev:.1e} <= 1e-14"))
}

fn criterion_8() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(80);
    let mut worst = f64::INFINITY;
    for i in 0..5 {
        let n = 2 + i % 4;
        let a = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
        let model = LtvModel::new(MatrixFn::Constant(a.clone()), MatrixFn::zeros(n, 1), MatrixFn::zeros(1, n), MatrixFn::zeros(1, 1)).unwrap();
        let oracle = expm(&a);
        let err = |steps: usize| {
            let grid = TimeGrid::uniform(0.0, 1.0 / steps as f64, steps, steps).unwrap();
            let u = SignalTrajectory::constant(&grid, DVector::zeros(1));
            (preintegrate_segment(&model, &u, 0, 0, steps).unwrap().f - &oracle).norm()
        };
        worst = worst.min(err(10) / err(20));
    }
    verdict(worst >= 12.0, format!("smallest error ratio per halving {worst:.2} >= 12"))
}

fn criterion_9() -> Verdict {
    let scn = scenario::load("scalar-mc").unwrap();
    let start = Instant::now();
    let (report, _) = preobs::montecarlo::run(&scn, scn.noise.seed, 1000, None).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let ratio = report.consistency.last().unwrap().ratio[0];
    let (plain, weighted) = (report.estimators[0].theta_rmse, report.estimators[1].theta_rmse);
    let ok = (0.85..=1.15).contains(&ratio) && weighted <= plain && secs < 60.0 && report.failed.is_empty();
    verdict(ok, format!(
        "var(x - xi)(t_end) / Pi(t_end) = {ratio:.3} in [0.85, 1.15]; theta RMSE weighted {weighted:.4e} <= plain {plain:.4e}; {secs:.1} s < 60 s"
    ))
}

fn criterion_10() -> Verdict {
    let col = |v: [f64; 3]| DMatrix::from_column_slice(3, 1, &v);
    let spec = RigidBodySpec {
        omega: MatrixFn::Sinusoid {
            offset: col([0.0; 3]),
            harmonics: vec![
                Harmonic { amplitude: col([1.0, 0.0, 0.0]), freq: 1.0, phase: 0.0 },
                Harmonic { amplitude: col([0.0, 0.0, 1.0]), freq: 1.0, phase: FRAC_PI_2 },
            ],
        },
        accel: MatrixFn::Constant(col([0.1, 0.0, 0.0])),
        initial: ExtendedPose::identity(),
        gravity: preobs_core::manifold::gravity(),
    };
    let gap = |every: usize| {
        let grid = TimeGrid::uniform(0.0, 1e-3, 2000, every).unwrap();
        let truth = simulate_rigid_body(&spec, &grid).unwrap();
        let chain = |m| {
            preintegrate_keyframes(&truth.imu, &ImuBias::default(), m)
                .unwrap()
                .iter()
                .fold(Rotation::identity(), |acc, s| acc * s.delta_r)
        };
        chain(PreintMethod::ExactSubstep).angle_to(&chain(PreintMethod::ExpApprox))
    };
    let g: Vec<f64> = [400, 200, 100].iter().map(|&e| gap(e)).collect();
    let ratios = [g[0] / g[1], g[1] / g[2]];
    let ok = ratios.iter().all(|r| (3.4..=4.6).contains(r));
    verdict(ok, format!("discrepancies {:.2e} {:.2e} {:.2e}, ratios {:.3} {:.3} in [3.4, 4.6]", g[0], g[1], g[2], ratios[0], ratios[1]))
}

fn criterion_11() -> Verdict {
    let grid = TimeGrid::uniform(0.0, 1e-2, 300, 50).unwrap();
    let spec = random_rigid_body(110);
    let truth = simulate_rigid_body(&spec, &grid).unwrap();
    let lms = default_landmarks();
    let obs = sample_landmark_observations(&truth.keyframe_poses(), &lms, &(Matrix3::identity() * 1e-4), 111).unwrap();
    let bias = ImuBias::default();
    let ext = run_manifold_extension(&truth.imu, &bias, &Rotation::identity(), &Vector9::zeros()).unwrap();
    let pre = preintegrate_keyframes(&truth.imu, &bias, PreintMethod::ExactSubstep).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(112);
    let mut vec3 = |s: f64| Vector3::from_fn(|_, _| rng.gen_range(-s..s));
    let mut worst = 0.0f64;
    for i in 0..20 {
        let mode = if i % 2 == 0 { LandmarkMode::Known(lms.clone()) } else { LandmarkMode::Unknown };
        let landmarks: Vec<_> = lms.iter().map(|p| p + vec3(0.5)).collect();
        let rel = match i % 4 {
            0 | 1 => {
                let point = (exp(&vec3(1.5)), SVector::<f64, 6>::from_fn(|_, _| vec3(2.0)[0]), landmarks);
                pebo_jacobians(&ext, &obs, &mode, &PeboOptions::default(), point, 1e-6).unwrap().rel_error()
            }
            k => {
                let poses: Vec<_> = truth
                    .keyframe_poses()
                    .iter()
                    .map(|x| ExtendedPose::new(x.r * exp(&vec3(0.2)), x.v + vec3(0.5), x.p + vec3(0.5)))
                    .collect();
                let batch = if k == 2 { BatchMode::Soft } else { BatchMode::Hard };
                let opts = PreintegrationOptions { mode: batch, ..Default::default() }.with_kinematic_variance(1e-4);
                preintegration_jacobians(&pre, &obs, &mode, &opts, &poses, &landmarks, 1e-6).unwrap().rel_error()
            }
        };
        worst = worst.max(rel);
    }
    verdict(worst <= 1e-4, format!("max relative discrepancy {worst:.2e} <= 1e-4 over 20 points"))
}

fn criterion_12() -> Verdict {
    let tmp = tempfile::tempdir().unwrap();
    let mut compared = 0;
    let mut mismatched = Vec::new();
    for (name, _) in BUNDLED {
        let scn = scenario::load(name).unwrap();
        let dirs = [tmp.path().join(format!("{name}-a")), tmp.path().join(format!("{name}-b"))];
        for d in &dirs {
            let opts = Options { out: Some(d.clone()), ..Default::default() };
            cmd_simulate(&scn, &opts).unwrap();
            cmd_estimate(&scn, &opts).unwrap();
            cmd_verify(&scn, &opts).unwrap();
            if !scn.is_manifold() {
                let mc = Options { out: Some(d.join("mc")), trials: Some(200), ..opts.clone() };
                cmd_montecarlo(&scn, &mc).unwrap();
            }
        }
        let mut files: Vec<_> = walk(&dirs[0]);
        files.sort();
        for f in files {
            let rel = f.strip_prefix(&dirs[0]).unwrap();
            compared += 1;
            if std::fs::read(&f).ok() != std::fs::read(dirs[1].join(rel)).ok() {
                mismatched.push(format!("{name}/{}", rel.display()));
            }
        }
    }
    verdict(mismatched.is_empty(), format!("{compared} files compared across {} scenarios, mismatches: {mismatched:?}", BUNDLED.len()))
}

fn walk(dir: &std::path::Path) -> Vec<std::path::PathBuf> {
    let mut out = Vec::new();
    for e in std::fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(walk(&p));
        } else {
            out.push(p);
        }
    }
    out
}

fn main() {
    let cases = ltv_cases();
    let criteria: Vec<(&str, Box<dyn Fn() -> Verdict + '_>)> = vec![
        ("extension product equals chained transitions", Box::new(|| criterion_1(&cases))),
        ("mid-interval identity", Box::new(|| criterion_2(&cases))),
        ("PEBO equals hard batch", Box::new(|| criterion_3(&cases))),
        ("rotation chain on SO(3)", Box::new(criterion_4)),
        ("soft manifold batch approaches PEBO", Box::new(criterion_5)),
        ("hybrid observer convergence and UCO", Box::new(criterion_6)),
        ("scalar Kalman update", Box::new(criterion_7)),
        ("integrator order", Box::new(criterion_8)),
        ("Monte Carlo covariance consistency", Box::new(criterion_9)),
        ("exp-approx error order", Box::new(criterion_10)),
        ("Gauss-Newton Jacobians", Box::new(criterion_11)),
        ("determinism of bundled scenarios", Box::new(criterion_12)),
    ];
    let mut failures = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let v = match std::panic::catch_unwind(std::panic::AssertUnwindSafe(run)) {
            Ok(v) => v,
            Err(_) => verdict(false, "panicked".into()),
        };
        if !v.passed {
            failures += 1;
        }
        println!("criterion {:>2} {}: {} ({})", i + 1, if v.passed { "PASS" } else { "FAIL" }, name, v.detail);
    }
    println!("{} of {} criteria passed", criteria.len() - failures, criteria.len());
    if failures > 0 {
        std::process::exit(1);
    }
}
