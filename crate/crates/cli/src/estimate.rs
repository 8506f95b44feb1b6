//! Estimator dispatch and the estimate report.

use std::path::Path;
use std::time::Instant;

use nalgebra::{DMatrix, DVector, Matrix3};
use serde::Serialize;

use preobs_core::io::{fmt, write_json, write_observer_log};
use preobs_core::linalg::{rcond, RankPolicy};
use preobs_core::manifold::imu::{preintegrate_keyframes, PreintMethod};
use preobs_core::manifold::landmarks::LandmarkMode;
use preobs_core::manifold::lm::LmOptions;
use preobs_core::manifold::pebo::{run_manifold_extension, PeboOptions, Vector9};
use preobs_core::manifold::{solve_manifold_pebo, solve_manifold_preintegration, BatchMode, ExtendedPose, PoseError, PreintegrationOptions};
use preobs_core::observer::{check_uco, run_observer, ObserverLogRow};
use preobs_core::pebo::{build_regressor, estimate_theta, estimate_theta_weighted, propagate_noise, reconstruct_state, run_extension};
use preobs_core::preint::{forgetting_weights, preintegrate_all, solve_batch, solve_batch_hard};
use preobs_core::so3::Rotation;
use preobs_core::verify::{run_registry, CheckOutcome, EuclidCase, ManifoldCase};

use crate::error::CliError;
use crate::scenario::{EstimatorSpec, Scenario};
use crate::sim::{LtvData, RigidData, SimData};

/// Observer bookkeeping thresholds.
pub const SETTLING_FRACTION: f64 = 1e-3;
pub const UCO_DELTA: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Estimator {
    Batch,
    BatchHard,
    Pebo,
    PeboWeighted,
    Observer,
    ManifoldPebo,
    ManifoldPreint,
}

impl Estimator {
    pub const ALL: [Estimator; 7] = [
        Estimator::Batch,
        Estimator::BatchHard,
        Estimator::Pebo,
        Estimator::PeboWeighted,
        Estimator::Observer,
        Estimator::ManifoldPebo,
        Estimator::ManifoldPreint,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Estimator::Batch => "batch",
            Estimator::BatchHard => "batch-hard",
            Estimator::Pebo => "pebo",
            Estimator::PeboWeighted => "pebo-weighted",
            Estimator::Observer => "observer",
            Estimator::ManifoldPebo => "manifold-pebo",
            Estimator::ManifoldPreint => "manifold-preint",
        }
    }

    pub fn parse(s: &str) -> Result<Self, CliError> {
        Self::ALL.into_iter().find(|e| e.name() == s).ok_or_else(|| {
            let names: Vec<_> = Self::ALL.iter().map(|e| e.name()).collect();
            CliError::Validation(format!("unknown estimator `{s}` (valid: {})", names.join(", ")))
        })
    }

    pub fn is_manifold(self) -> bool {
        matches!(self, Estimator::ManifoldPebo | Estimator::ManifoldPreint)
    }
}

#[derive(Debug, Clone, Serialize)]
#[serde(untagged)]
pub enum KeyframeEstimates {
    Vector(Vec<Vec<f64>>),
    Pose(Vec<ExtendedPose>),
}

#[derive(Debug, Clone, Serialize)]
#[serde(untagged)]
pub enum KeyframeErrors {
    Vector(Vec<f64>),
    Pose(Vec<PoseError>),
}

#[derive(Debug, Clone, Serialize)]
pub struct Convergence {
    pub initial_error: f64,
    pub final_error: f64,
    /// First keyframe after which the error stays below the settling fraction.
    pub settling_keyframe: Option<usize>,
    pub settling_fraction: f64,
    pub uco_window: usize,
    pub uco_min_eigenvalue: f64,
    pub uco_passes: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct EstimatorReport {
    pub name: String,
    pub error: Option<String>,
    pub estimates: Option<KeyframeEstimates>,
    pub errors: Option<KeyframeErrors>,
    /// Largest per-keyframe error; translational for poses.
    pub max_error: Option<f64>,
    pub final_cost: Option<f64>,
    pub nullspace: Option<usize>,
    /// Reciprocal condition numbers recorded along the run, per keyframe.
    pub condition_log: Vec<f64>,
    pub convergence: Option<Convergence>,
    pub iterations: Option<usize>,
    #[serde(skip)]
    pub wall_time: f64,
    #[serde(skip)]
    pub observer_log: Vec<ObserverLogRow>,
}

impl EstimatorReport {
    fn empty(e: Estimator) -> Self {
        Self {
            name: e.name().into(),
            error: None,
            estimates: None,
            errors: None,
            max_error: None,
            final_cost: None,
            nullspace: None,
            condition_log: vec![],
            convergence: None,
            iterations: None,
            wall_time: 0.0,
            observer_log: vec![],
        }
    }

    fn vector(e: Estimator, states: &[DVector<f64>], truth: &[DVector<f64>]) -> Self {
        let errors: Vec<f64> = states.iter().zip(truth).map(|(a, b)| (a - b).norm()).collect();
        Self {
            max_error: Some(errors.iter().copied().fold(0.0, f64::max)),
            estimates: Some(KeyframeEstimates::Vector(states.iter().map(|s| s.iter().copied().collect()).collect())),
            errors: Some(KeyframeErrors::Vector(errors)),
            ..Self::empty(e)
        }
    }

    fn pose(e: Estimator, poses: &[ExtendedPose], truth: &[ExtendedPose]) -> Self {
        let errors: Vec<PoseError> = poses.iter().zip(truth).map(|(a, b)| a.distance(b)).collect();
        Self {
            max_error: Some(errors.iter().map(|p| p.position).fold(0.0, f64::max)),
            estimates: Some(KeyframeEstimates::Pose(poses.to_vec())),
            errors: Some(KeyframeErrors::Pose(errors)),
            ..Self::empty(e)
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct EstimateReport {
    pub scenario: String,
    pub seed: u64,
    pub keyframe_times: Vec<f64>,
    pub estimators: Vec<EstimatorReport>,
    /// Cross-module identities evaluated on the noise-free variant of the scenario.
    pub checks: Vec<CheckOutcome>,
}

fn dmat(rows: &Option<Vec<Vec<f64>>>) -> Option<DMatrix<f64>> {
    rows.as_ref().map(|r| DMatrix::from_fn(r.len(), r[0].len(), |i, j| r[i][j]))
}

fn ltv_estimate(e: Estimator, d: &LtvData, cfg: &EstimatorSpec) -> Result<EstimatorReport, CliError> {
    let model = &d.model;
    let meas = &d.meas;
    let grid = &meas.grid;
    let truth_kf = d.truth.at_keyframes();
    let n_int = grid.n_intervals();
    let lambda = cfg.forgetting.unwrap_or(1.0);
    if !(lambda > 0.0 && lambda <= 1.0) {
        return Err(CliError::Validation("estimator.forgetting: must lie in (0, 1]".into()));
    }
    let xi0 = cfg.xi0.clone().map(DVector::from_vec).unwrap_or_else(|| DVector::zeros(model.n));
    match e {
        Estimator::Batch | Estimator::BatchHard => {
            let segs = preintegrate_all(model, &meas.u)?;
            let gamma = forgetting_weights(n_int, lambda);
            let est = if e == Estimator::Batch {
                let gp = vec![cfg.gamma_prime.unwrap_or(1.0); n_int];
                solve_batch(&segs, meas, model, &gamma, &gp, RankPolicy::Strict)?
            } else {
                solve_batch_hard(&segs, meas, model, &gamma, RankPolicy::Strict)?
            };
            let mut r = EstimatorReport::vector(e, &est.states, &truth_kf);
            r.final_cost = Some(est.cost);
            r.nullspace = Some(est.nullspace);
            r.condition_log = segs.iter().map(|s| rcond(&s.f)).collect();
            Ok(r)
        }
        Estimator::Pebo | Estimator::PeboWeighted => {
            let ext = run_extension(model, &meas.u, &xi0)?;
            let reg = build_regressor(meas, &ext, model)?;
            let count = reg.len();
            let theta = if e == Estimator::Pebo {
                estimate_theta(&reg, &forgetting_weights(count, lambda))?
            } else {
                let budget = propagate_noise(model, grid, &meas.sigma_u, &meas.sigma_y)?;
                estimate_theta_weighted(&reg, &budget, model, count)?.theta
            };
            let states = reconstruct_state(&ext, &theta);
            let mut r = EstimatorReport::vector(e, &states, &truth_kf);
            let cost: f64 = reg.ybar.iter().zip(&reg.g).map(|(y, g)| (y - g * &theta).norm_squared()).sum();
            r.final_cost = Some(cost);
            r.condition_log = ext.keyframe_rcond.clone();
            Ok(r)
        }
        Estimator::Observer => {
            let x_hat0 = match &cfg.x0_guess {
                Some(v) => DVector::from_vec(v.clone()),
                None => &d.x0 + DVector::from_element(model.n, 10.0 / (model.n as f64).sqrt()),
            };
            let eye = DMatrix::<f64>::identity(model.n, model.n);
            let p0 = dmat(&cfg.p0).unwrap_or_else(|| &eye * 100.0);
            let q = dmat(&cfg.q).unwrap_or_else(|| &eye * 1e-6);
            let r = dmat(&cfg.r).unwrap_or_else(|| {
                if meas.sigma_y.iter().any(|&v| v != 0.0) {
                    meas.sigma_y.clone()
                } else {
                    DMatrix::identity(model.p, model.p) * 1e-2
                }
            });
            let run = run_observer(model, &meas.u, meas, &x_hat0, &p0, &q, &r, Some(&d.truth))?;
            let states: Vec<DVector<f64>> = run.states.iter().map(|s| s.x.clone()).collect();
            let mut rep = EstimatorReport::vector(e, &states, &truth_kf);
            rep.condition_log = run.states.iter().map(|s| rcond(&s.p)).collect();
            let transitions: Vec<DMatrix<f64>> = run.segments.iter().map(|s| s.f.clone()).collect();
            let outputs: Vec<DMatrix<f64>> = grid.keyframes().iter().map(|&i| model.c(grid.time(i))).collect();
            let window = model.n.min(transitions.len()).max(1);
            let uco = check_uco(&transitions, &outputs, window, UCO_DELTA)?;
            let lmin = uco.iter().map(|g| g.min_eigenvalue).fold(f64::INFINITY, f64::min);
            let errs: Vec<f64> = run.log.iter().filter_map(|l| l.error_norm).collect();
            rep.convergence = Some(Convergence {
                initial_error: errs.first().copied().unwrap_or(f64::NAN),
                final_error: errs.last().copied().unwrap_or(f64::NAN),
                settling_keyframe: run.settling_keyframe(SETTLING_FRACTION),
                settling_fraction: SETTLING_FRACTION,
                uco_window: window,
                uco_min_eigenvalue: lmin,
                uco_passes: uco.iter().all(|g| g.passes),
            });
            rep.observer_log = run.log;
            Ok(rep)
        }
        _ => Err(CliError::Validation(format!("`{}` needs a rigid-body scenario", e.name()))),
    }
}

fn lm_options(cfg: &EstimatorSpec) -> LmOptions {
    let mut lm = LmOptions::default();
    if let Some(m) = cfg.max_iterations {
        lm.max_iterations = m;
    }
    lm
}

/// Landmark observations with the cost covariance the estimators assume.
fn cost_observations(d: &RigidData, cfg: &EstimatorSpec) -> preobs_core::manifold::LandmarkObservations {
    let mut obs = d.obs.clone();
    let data_var = obs.sigma[(0, 0)];
    let var = cfg.landmark_variance.unwrap_or(if data_var > 0.0 { data_var } else { 1e-4 });
    obs.sigma = Matrix3::identity() * var;
    obs
}

fn rigid_estimate(e: Estimator, d: &RigidData, cfg: &EstimatorSpec) -> Result<EstimatorReport, CliError> {
    let truth_kf = d.truth.keyframe_poses();
    let obs = cost_observations(d, cfg);
    let mode = if cfg.unknown_landmarks { LandmarkMode::Unknown } else { LandmarkMode::Known(d.landmarks.clone()) };
    let g = d.truth.gravity;
    let lm = lm_options(cfg);
    let pebo = || -> Result<_, CliError> {
        let ext = run_manifold_extension(&d.imu, &d.bias, &Rotation::identity(), &Vector9::zeros())?;
        Ok(solve_manifold_pebo(&ext, &obs, &mode, &PeboOptions { lm, gravity: g, ..Default::default() })?)
    };
    match e {
        Estimator::ManifoldPebo => {
            let est = pebo()?;
            let mut r = EstimatorReport::pose(e, &est.poses, &truth_kf);
            r.final_cost = Some(est.cost);
            r.nullspace = Some(est.nullspace);
            r.iterations = Some(est.report.iterations);
            Ok(r)
        }
        Estimator::ManifoldPreint => {
            let method = cfg.preint_method.unwrap_or(PreintMethod::ExactSubstep);
            let pre = preintegrate_keyframes(&d.imu, &d.bias, method)?;
            let mut opts = PreintegrationOptions {
                lm,
                mode: cfg.batch_mode.unwrap_or(BatchMode::Soft),
                gravity: g,
                ..Default::default()
            }
            .with_kinematic_variance(cfg.kinematic_variance.unwrap_or(1e-6));
            if cfg.unknown_landmarks {
                let init = pebo()?;
                opts.initial = Some(init.poses);
                opts.initial_landmarks = Some(init.landmarks);
            }
            let est = solve_manifold_preintegration(&pre, &obs, &mode, &opts)?;
            let mut r = EstimatorReport::pose(e, &est.poses, &truth_kf);
            r.final_cost = Some(est.cost);
            r.nullspace = Some(est.nullspace);
            r.iterations = Some(est.report.iterations);
            Ok(r)
        }
        _ => Err(CliError::Validation(format!("`{}` needs an LTV scenario", e.name()))),
    }
}

pub fn run_one(e: Estimator, data: &SimData, cfg: &EstimatorSpec) -> EstimatorReport {
    let start = Instant::now();
    let res = match data {
        SimData::Ltv(d) => ltv_estimate(e, d, cfg),
        SimData::Rigid(d) => rigid_estimate(e, d, cfg),
    };
    let mut r = res.unwrap_or_else(|err| EstimatorReport { error: Some(err.to_string()), ..EstimatorReport::empty(e) });
    r.wall_time = start.elapsed().as_secs_f64();
    r
}

/// Estimators selected by the flag, the scenario, or every applicable one.
pub fn select(scn: &Scenario, flag: Option<&str>) -> Result<Vec<Estimator>, CliError> {
    let list: Vec<Estimator> = match (flag, &scn.estimator.run) {
        (Some(f), _) => vec![Estimator::parse(f)?],
        (None, Some(names)) => names.iter().map(|n| Estimator::parse(n)).collect::<Result<_, _>>()?,
        (None, None) => Estimator::ALL.into_iter().filter(|e| e.is_manifold() == scn.is_manifold()).collect(),
    };
    for e in &list {
        if e.is_manifold() != scn.is_manifold() {
            let kind = if scn.is_manifold() { "rigid-body" } else { "LTV" };
            return Err(CliError::Validation(format!("estimator `{}` does not apply to the {kind} scenario `{}`", e.name(), scn.name)));
        }
    }
    Ok(list)
}

/// Identities evaluated on the noise-free variant of this scenario only.
pub fn scenario_checks(data: &SimData, seed: u64) -> Vec<CheckOutcome> {
    let out = match data {
        SimData::Ltv(d) => {
            let case = EuclidCase { model: d.model.clone(), x0: d.x0.clone(), u: d.u.clone() };
            run_registry(&[case], &[], None)
        }
        SimData::Rigid(d) => {
            let case = ManifoldCase::new(d.spec.clone(), d.truth.grid.clone(), d.landmarks.clone(), seed);
            run_registry(&[], &[case], None)
        }
    };
    out.into_iter().filter(|o| o.cases > 0).collect()
}

fn write_errors_csv(path: &Path, times: &[f64], reports: &[EstimatorReport]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path)?;
    let pose = reports.iter().any(|r| matches!(r.errors, Some(KeyframeErrors::Pose(_))));
    if pose {
        w.write_record(["estimator", "k", "t", "rotation", "velocity", "position"])?;
    } else {
        w.write_record(["estimator", "k", "t", "error"])?;
    }
    for r in reports {
        match &r.errors {
            Some(KeyframeErrors::Vector(v)) => {
                for (k, (t, e)) in times.iter().zip(v).enumerate() {
                    w.write_record([r.name.clone(), k.to_string(), fmt(*t), fmt(*e)])?;
                }
            }
            Some(KeyframeErrors::Pose(v)) => {
                for (k, (t, e)) in times.iter().zip(v).enumerate() {
                    w.write_record([r.name.clone(), k.to_string(), fmt(*t), fmt(e.rotation), fmt(e.velocity), fmt(e.position)])?;
                }
            }
            None => {}
        }
    }
    w.flush()?;
    Ok(())
}

fn write_estimates_csv(path: &Path, times: &[f64], reports: &[EstimatorReport]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header_done = false;
    for r in reports {
        let rows: Vec<Vec<f64>> = match &r.estimates {
            Some(KeyframeEstimates::Vector(v)) => v.clone(),
            Some(KeyframeEstimates::Pose(p)) => p
                .iter()
                .map(|x| x.r.row_major().iter().chain(x.v.iter()).chain(x.p.iter()).copied().collect())
                .collect(),
            None => continue,
        };
        if !header_done {
            let mut h = vec!["estimator".to_string(), "k".into(), "t".into()];
            if matches!(r.estimates, Some(KeyframeEstimates::Pose(_))) {
                for i in 0..3 {
                    for j in 0..3 {
                        h.push(format!("r{i}{j}"));
                    }
                }
                h.extend(["vx", "vy", "vz", "px", "py", "pz"].map(String::from));
            } else {
                h.extend((0..rows.first().map_or(0, |x| x.len())).map(|i| format!("x{i}")));
            }
            w.write_record(&h)?;
            header_done = true;
        }
        for (k, (t, row)) in times.iter().zip(&rows).enumerate() {
            let mut rec = vec![r.name.clone(), k.to_string(), fmt(*t)];
            rec.extend(row.iter().map(|v| fmt(*v)));
            w.write_record(&rec)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Writes `report.json`, `errors.csv`, `estimate.csv` and, when the observer
/// ran, `observer.csv`.
pub fn write_report(report: &EstimateReport, dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir)?;
    write_json(&dir.join("report.json"), report)?;
    write_errors_csv(&dir.join("errors.csv"), &report.keyframe_times, &report.estimators)?;
    write_estimates_csv(&dir.join("estimate.csv"), &report.keyframe_times, &report.estimators)?;
    if let Some(obs) = report.estimators.iter().find(|r| r.name == Estimator::Observer.name() && !r.observer_log.is_empty()) {
        write_observer_log(&dir.join("observer.csv"), &obs.observer_log)?;
    }
    Ok(())
}
