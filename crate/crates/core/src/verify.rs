//! Cross-method identities as executable checks.
//!
//! Every check is driven by a list of cases (random or scenario-derived) and
//! reports the largest deviation it saw against a fixed tolerance. The CLI
//! `verify` command and the acceptance tests both evaluate [`REGISTRY`].

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::Result;
use crate::grid::TimeGrid;
use crate::linalg::RankPolicy;
use crate::ltv::{sample_measurements, simulate, Harmonic, LtvModel, MatrixFn, SignalTrajectory};
use crate::manifold::imu::{preintegrate_keyframes, ImuBias, PreintMethod};
use crate::manifold::kinematics::{simulate_rigid_body, RigidBodySpec};
use crate::manifold::landmarks::{default_landmarks, sample_landmark_observations, LandmarkMode};
use crate::manifold::lm::LmOptions;
use crate::manifold::pebo::{run_manifold_extension, solve_manifold_pebo, PeboOptions, Vector9};
use crate::manifold::{
    max_pose_error, solve_manifold_preintegration, BatchMode, ExtendedPose, PreintegrationOptions,
};
use crate::pebo::{build_regressor, estimate_theta, reconstruct_state, run_extension};
use crate::preint::{preintegrate_all, preintegrate_trajectory, solve_batch_hard};
use crate::so3::{exp, Rotation};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum CheckId {
    /// `Omega(t_k)` equals the chronological product of preintegrated `F_i`.
    OmegaProduct,
    /// `v_k = xi(t_{k+1}) - F_k xi(t_k)`.
    IncrementFromExtension,
    /// `F_k = Omega(t_{k+1}) Omega(t_k)^{-1}`.
    TransitionFromExtension,
    /// Mid-interval `F_t` and `v_t` from the extension.
    MidInterval,
    /// PEBO reconstruction equals the hard-constrained batch estimate.
    PeboEqualsBatch,
    /// `Q(t_0)^T Q(t_k)` equals the chained rotation preintegrals.
    RotationChain,
    /// Hard-constrained manifold batch equals the manifold PEBO estimate.
    ManifoldHardEqualsPebo,
    /// Soft batch approaches the PEBO estimate as the kinematic variance shrinks.
    ManifoldSoftLimit,
}

pub struct CheckSpec {
    pub id: CheckId,
    pub name: &'static str,
    pub description: &'static str,
    pub tolerance: f64,
}

pub const REGISTRY: &[CheckSpec] = &[
    CheckSpec {
        id: CheckId::OmegaProduct,
        name: "omega-product",
        description: "Omega(t_k) = F_{k-1} ... F_0 (relative)",
        tolerance: 1e-8,
    },
    CheckSpec {
        id: CheckId::IncrementFromExtension,
        name: "increment",
        description: "v_k = xi(t_k+1) - F_k xi(t_k) (relative)",
        tolerance: 1e-8,
    },
    CheckSpec {
        id: CheckId::TransitionFromExtension,
        name: "transition",
        description: "F_k = Omega(t_k+1) Omega(t_k)^-1 (relative)",
        tolerance: 1e-8,
    },
    CheckSpec {
        id: CheckId::MidInterval,
        name: "mid-interval",
        description: "F_t, v_t inside each interval from (xi, Omega) (relative)",
        tolerance: 1e-8,
    },
    CheckSpec {
        id: CheckId::PeboEqualsBatch,
        name: "pebo-equals-batch",
        description: "PEBO keyframe states = hard batch states, xi0 = 0, noise-free",
        tolerance: 1e-8,
    },
    CheckSpec {
        id: CheckId::RotationChain,
        name: "rotation-chain",
        description: "log-distance of Q(t0)^T Q(t_k) and the chained dR (rad)",
        tolerance: 1e-7,
    },
    CheckSpec {
        id: CheckId::ManifoldHardEqualsPebo,
        name: "manifold-hard-equals-pebo",
        description: "hard-constrained manifold batch = manifold PEBO poses",
        tolerance: 1e-7,
    },
    CheckSpec {
        id: CheckId::ManifoldSoftLimit,
        name: "manifold-soft-limit",
        description: "soft batch -> PEBO as Sigma_j = s I shrinks; final position gap",
        tolerance: 1e-4,
    },
];

pub fn spec(id: CheckId) -> &'static CheckSpec {
    REGISTRY.iter().find(|c| c.id == id).expect("every check is registered")
}

#[derive(Debug, Clone, Serialize)]
pub struct CheckOutcome {
    pub id: CheckId,
    pub name: String,
    pub description: String,
    pub cases: usize,
    pub max_deviation: f64,
    pub tolerance: f64,
    pub passed: bool,
    /// Extra series, e.g. `(variance, discrepancy)` pairs of a sweep.
    pub series: Vec<(f64, f64)>,
    pub error: Option<String>,
}

impl CheckOutcome {
    fn new(id: CheckId, tol: Option<f64>, cases: usize, dev: f64) -> Self {
        let s = spec(id);
        let tolerance = tol.unwrap_or(s.tolerance);
        CheckOutcome {
            id,
            name: s.name.into(),
            description: s.description.into(),
            cases,
            max_deviation: dev,
            tolerance,
            passed: dev.is_finite() && dev <= tolerance,
            series: Vec::new(),
            error: None,
        }
    }

    fn failed(id: CheckId, tol: Option<f64>, cases: usize, err: String) -> Self {
        let mut o = Self::new(id, tol, cases, f64::NAN);
        o.error = Some(err);
        o
    }
}

/// A noise-free LTV run.
#[derive(Debug, Clone)]
pub struct EuclidCase {
    pub model: LtvModel,
    pub x0: DVector<f64>,
    pub u: SignalTrajectory,
}

/// A rigid-body run with landmark measurements.
#[derive(Debug, Clone)]
pub struct ManifoldCase {
    pub spec: RigidBodySpec,
    pub grid: TimeGrid,
    pub landmarks: Vec<Vector3<f64>>,
    /// Standard deviation assumed by the landmark cost.
    pub sigma_y: f64,
    /// Standard deviation of the perturbation actually added to the landmarks.
    pub noise: f64,
    pub seed: u64,
}

fn uniform_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize, bound: f64) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| rng.gen_range(-bound..bound))
}

/// Bounded random LTV system: skew part plus damping plus one sinusoidal term,
/// observed through a dense output map, driven by a sinusoidal input.
pub fn random_ltv_case(seed: u64, n: usize, grid: &TimeGrid) -> Result<EuclidCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = rng.gen_range(1..=2);
    let p = rng.gen_range(1..=2);
    let s = uniform_matrix(&mut rng, n, n, 1.0);
    let offset = (&s - s.transpose()) * 0.5 - DMatrix::identity(n, n) * 0.3;
    let harmonics = vec![Harmonic {
        amplitude: uniform_matrix(&mut rng, n, n, 0.5),
        freq: rng.gen_range(0.5..2.0),
        phase: rng.gen_range(0.0..std::f64::consts::TAU),
    }];
    let a = MatrixFn::Sinusoid { offset, harmonics };
    let b = MatrixFn::Constant(uniform_matrix(&mut rng, n, m, 1.0));
    let c = MatrixFn::Constant(uniform_matrix(&mut rng, p, n, 1.0));
    let model = LtvModel::new(a, b, c, MatrixFn::zeros(p, m))?;
    let x0 = DVector::from_fn(n, |_, _| rng.gen_range(-2.0..2.0));
    let freqs: Vec<f64> = (0..m).map(|_| rng.gen_range(0.3..3.0)).collect();
    let u = SignalTrajectory::sample(grid, |t| DVector::from_fn(m, |j, _| (freqs[j] * t).sin()));
    Ok(EuclidCase { model, x0, u })
}

fn random_vector_fn(rng: &mut ChaCha8Rng, offset: f64, amp: f64) -> MatrixFn {
    let col = |rng: &mut ChaCha8Rng, b: f64| DMatrix::from_fn(3, 1, |_, _| rng.gen_range(-b..b));
    let offset = col(rng, offset);
    let harmonics = (0..2)
        .map(|_| Harmonic { amplitude: col(rng, amp), freq: rng.gen_range(0.3..1.5), phase: rng.gen_range(0.0..std::f64::consts::TAU) })
        .collect();
    MatrixFn::Sinusoid { offset, harmonics }
}

/// Smooth random angular rate and acceleration with a random initial pose.
pub fn random_rigid_body(seed: u64) -> RigidBodySpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let omega = random_vector_fn(&mut rng, 0.3, 0.5);
    let accel = random_vector_fn(&mut rng, 0.2, 1.0);
    let r = exp(&Vector3::from_fn(|_, _| rng.gen_range(-1.5..1.5)));
    let v = Vector3::from_fn(|_, _| rng.gen_range(-1.0..1.0));
    let p = Vector3::from_fn(|_, _| rng.gen_range(-2.0..2.0));
    RigidBodySpec { omega, accel, initial: ExtendedPose::new(r, v, p), gravity: crate::manifold::gravity() }
}

/// Cost standard deviation and actual perturbation of the landmark data used
/// by the manifold limit check.
pub const LIMIT_SIGMA_Y: f64 = 0.05;
pub const LIMIT_PERTURBATION: f64 = 1e-4;

impl ManifoldCase {
    pub fn new(spec: RigidBodySpec, grid: TimeGrid, landmarks: Vec<Vector3<f64>>, seed: u64) -> Self {
        ManifoldCase { spec, grid, landmarks, sigma_y: LIMIT_SIGMA_Y, noise: LIMIT_PERTURBATION, seed }
    }
}

pub fn random_manifold_case(seed: u64, grid: &TimeGrid) -> ManifoldCase {
    ManifoldCase::new(random_rigid_body(seed), grid.clone(), default_landmarks(), seed)
}

fn rel(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).norm() / b.norm().max(1e-300)
}

/// Deviations `(omega-product, increment, transition)` on one case.
pub fn extension_identities(case: &EuclidCase) -> Result<(f64, f64, f64)> {
    let zero = DVector::zeros(case.model.n);
    let ext = run_extension(&case.model, &case.u, &zero)?;
    let segs = preintegrate_all(&case.model, &case.u)?;
    let kf = case.u.grid.keyframes();
    let mut prod = DMatrix::identity(case.model.n, case.model.n);
    let (mut d_prod, mut d_inc, mut d_tr) = (0.0f64, 0.0f64, 0.0f64);
    for (k, s) in segs.iter().enumerate() {
        prod = &s.f * prod;
        let (i, j) = (kf[k], kf[k + 1]);
        d_prod = d_prod.max(rel(&prod, &ext.omega[j]));
        let phi = ext.transition(j, i)?;
        d_tr = d_tr.max(rel(&s.f, &phi));
        let v = &ext.xi[j] - &phi * &ext.xi[i];
        let scale = 1.0 + ext.xi[j].norm() + s.v.norm();
        d_inc = d_inc.max((&s.v - v).norm() / scale);
    }
    Ok((d_prod, d_inc, d_tr))
}

/// Mid-interval deviation of `(F_t, v_t)` from the extension on one case.
pub fn mid_interval_identity(case: &EuclidCase) -> Result<f64> {
    let zero = DVector::zeros(case.model.n);
    let ext = run_extension(&case.model, &case.u, &zero)?;
    let mut dev = 0.0f64;
    for (start, end) in case.u.grid.intervals() {
        let traj = preintegrate_trajectory(&case.model, &case.u, start, end)?;
        for (off, (f, v)) in traj.iter().enumerate().skip(1) {
            let i = start + off;
            if i == end {
                break;
            }
            let phi = ext.transition(i, start)?;
            dev = dev.max(rel(f, &phi));
            let vx = &ext.xi[i] - &phi * &ext.xi[start];
            dev = dev.max((v - vx).norm() / (1.0 + ext.xi[i].norm() + v.norm()));
        }
    }
    Ok(dev)
}

/// Largest keyframe gap between PEBO and the hard batch, relative to
/// `1 + max |x_k|`.
pub fn pebo_batch_identity(case: &EuclidCase) -> Result<f64> {
    let model = &case.model;
    let x = simulate(model, &case.x0, &case.u)?;
    let meas = sample_measurements(model, &x, &case.u, &DMatrix::zeros(model.m, model.m), &DMatrix::zeros(model.p, model.p), 0)?;
    let n_int = case.u.grid.n_intervals();
    let gamma = vec![1.0; n_int];
    let ext = run_extension(model, &meas.u, &DVector::zeros(model.n))?;
    let reg = build_regressor(&meas, &ext, model)?;
    let theta = estimate_theta(&reg, &gamma)?;
    let pebo = reconstruct_state(&ext, &theta);
    let segs = preintegrate_all(model, &meas.u)?;
    let batch = solve_batch_hard(&segs, &meas, model, &gamma, RankPolicy::Strict)?;
    let scale = 1.0 + batch.states.iter().map(|s| s.norm()).fold(0.0, f64::max);
    Ok(pebo.iter().zip(&batch.states).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max) / scale)
}

/// Largest log-distance between `Q(t_0)^T Q(t_k)` and the chained preintegrals.
pub fn rotation_chain_identity(spec: &RigidBodySpec, grid: &TimeGrid) -> Result<f64> {
    let truth = simulate_rigid_body(spec, grid)?;
    let bias = ImuBias::default();
    let ext = run_manifold_extension(&truth.imu, &bias, &Rotation::identity(), &Vector9::zeros())?;
    let pre = preintegrate_keyframes(&truth.imu, &bias, PreintMethod::ExactSubstep)?;
    let q = ext.keyframe_q();
    let mut chain = Rotation::identity();
    let mut dev = 0.0f64;
    for (k, s) in pre.iter().enumerate() {
        chain = chain * s.delta_r;
        let lhs = q[0].transpose() * q[k + 1];
        dev = dev.max(lhs.angle_to(&chain));
    }
    Ok(dev)
}

fn tight_lm() -> LmOptions {
    LmOptions { rel_tol: 1e-15, max_iterations: 200, ..Default::default() }
}

#[derive(Debug, Clone, Serialize)]
pub struct SoftLimitResult {
    pub hard_vs_pebo: f64,
    /// `(variance, max keyframe position gap)` per sweep entry.
    pub sweep: Vec<(f64, f64)>,
}

pub const SWEEP: [f64; 3] = [1e-2, 1e-4, 1e-6];

/// Manifold PEBO against the hard batch and the soft batch over [`SWEEP`].
///
/// The IMU is exact. The landmarks carry a small perturbation, since with
/// perfectly consistent data every estimator returns the truth and the gap
/// is integration residue.
pub fn manifold_limit(case: &ManifoldCase) -> Result<SoftLimitResult> {
    let truth = simulate_rigid_body(&case.spec, &case.grid)?;
    let bias = ImuBias::default();
    let kf = truth.keyframe_poses();
    let noise = Matrix3::identity() * (case.noise * case.noise);
    let mut obs = sample_landmark_observations(&kf, &case.landmarks, &noise, case.seed)?;
    obs.sigma = Matrix3::identity() * (case.sigma_y * case.sigma_y);
    let mode = LandmarkMode::Known(case.landmarks.clone());
    let ext = run_manifold_extension(&truth.imu, &bias, &Rotation::identity(), &Vector9::zeros())?;
    let pebo_opts = PeboOptions { lm: tight_lm(), gravity: case.spec.gravity, ..Default::default() };
    let pebo = solve_manifold_pebo(&ext, &obs, &mode, &pebo_opts)?;
    let pre = preintegrate_keyframes(&truth.imu, &bias, PreintMethod::ExactSubstep)?;
    let base = PreintegrationOptions { lm: tight_lm(), gravity: case.spec.gravity, ..Default::default() };
    let hard = solve_manifold_preintegration(&pre, &obs, &mode, &PreintegrationOptions { mode: BatchMode::Hard, ..base.clone() })?;
    let e = max_pose_error(&hard.poses, &pebo.poses);
    let hard_vs_pebo = e.rotation.max(e.velocity).max(e.position);
    let mut sweep = Vec::new();
    for s in SWEEP {
        let opts = base.clone().with_kinematic_variance(s);
        let soft = solve_manifold_preintegration(&pre, &obs, &mode, &opts)?;
        sweep.push((s, max_pose_error(&soft.poses, &pebo.poses).position));
    }
    Ok(SoftLimitResult { hard_vs_pebo, sweep })
}

fn fold_cases<T>(
    id: CheckId,
    tol: Option<f64>,
    cases: &[T],
    f: impl Fn(&T) -> Result<f64>,
) -> CheckOutcome {
    let mut dev = 0.0f64;
    for c in cases {
        match f(c) {
            Ok(d) => dev = dev.max(d),
            Err(e) => return CheckOutcome::failed(id, tol, cases.len(), e.to_string()),
        }
    }
    CheckOutcome::new(id, tol, cases.len(), dev)
}

/// Evaluates every registered check. `tolerance` replaces all tolerances.
pub fn run_registry(euclid: &[EuclidCase], manifold: &[ManifoldCase], tolerance: Option<f64>) -> Vec<CheckOutcome> {
    let mut out = Vec::new();
    let ext: Vec<Result<(f64, f64, f64)>> = euclid.iter().map(extension_identities).collect();
    let pick = |sel: fn(&(f64, f64, f64)) -> f64, id: CheckId| -> CheckOutcome {
        let mut dev = 0.0f64;
        for r in &ext {
            match r {
                Ok(t) => dev = dev.max(sel(t)),
                Err(e) => return CheckOutcome::failed(id, tolerance, euclid.len(), e.to_string()),
            }
        }
        CheckOutcome::new(id, tolerance, euclid.len(), dev)
    };
    out.push(pick(|t| t.0, CheckId::OmegaProduct));
    out.push(pick(|t| t.1, CheckId::IncrementFromExtension));
    out.push(pick(|t| t.2, CheckId::TransitionFromExtension));
    out.push(fold_cases(CheckId::MidInterval, tolerance, euclid, mid_interval_identity));
    out.push(fold_cases(CheckId::PeboEqualsBatch, tolerance, euclid, pebo_batch_identity));
    out.push(fold_cases(CheckId::RotationChain, tolerance, manifold, |c| rotation_chain_identity(&c.spec, &c.grid)));

    let limits: Vec<Result<SoftLimitResult>> = manifold.iter().map(manifold_limit).collect();
    let mut hard = CheckOutcome::new(CheckId::ManifoldHardEqualsPebo, tolerance, manifold.len(), 0.0);
    let mut soft = CheckOutcome::new(CheckId::ManifoldSoftLimit, tolerance, manifold.len(), 0.0);
    for r in &limits {
        match r {
            Ok(l) => {
                hard.max_deviation = hard.max_deviation.max(l.hard_vs_pebo);
                let last = l.sweep.last().map_or(f64::NAN, |p| p.1);
                soft.max_deviation = soft.max_deviation.max(last);
                let monotone = l.sweep.windows(2).all(|w| w[1].1 < w[0].1);
                if !monotone {
                    soft.error = Some("discrepancy does not decrease strictly across the sweep".into());
                }
                soft.series.extend(l.sweep.iter().copied());
            }
            Err(e) => {
                hard.error = Some(e.to_string());
                soft.error = Some(e.to_string());
            }
        }
    }
    for o in [&mut hard, &mut soft] {
        o.passed = o.error.is_none() && o.max_deviation.is_finite() && o.max_deviation <= o.tolerance;
    }
    out.push(hard);
    out.push(soft);
    out
}

pub fn all_passed(outcomes: &[CheckOutcome]) -> bool {
    outcomes.iter().all(|o| o.passed)
}

/// Fixed-width pass/fail table.
pub fn format_table(outcomes: &[CheckOutcome]) -> String {
    let mut s = format!("{:<28} {:>6} {:>12} {:>10}  {}\n", "check", "cases", "max dev", "tol", "result");
    for o in outcomes {
        s.push_str(&format!(
            "{:<28} {:>6} {:>12.3e} {:>10.1e}  {}\n",
            o.name,
            o.cases,
            o.max_deviation,
            o.tolerance,
            if o.passed { "PASS" } else { "FAIL" }
        ));
        if let Some(e) = &o.error {
            s.push_str(&format!("    {e}\n"));
        }
        for (x, y) in &o.series {
            s.push_str(&format!("    sigma^2 = {x:.0e}: {y:.3e}\n"));
        }
    }
    s
}
