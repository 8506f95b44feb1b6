//! WebAssembly bindings for three interactive experiments.
//!
//! Each exported function takes plain numbers and returns a JSON string; on
//! failure the JSON is `{"error": "..."}`. The typed functions behind them are
//! ordinary Rust and are tested natively.

use std::f64::consts::FRAC_PI_2;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use wasm_bindgen::prelude::*;

use preobs_core::ltv::{derive_seed, sample_measurements, simulate, Harmonic, LtvModel, MatrixFn, SignalTrajectory};
use preobs_core::manifold::imu::{preintegrate_keyframes, ImuBias, PreintMethod};
use preobs_core::manifold::kinematics::{simulate_rigid_body, RigidBodySpec};
use preobs_core::manifold::{gravity, ExtendedPose};
use preobs_core::observer::run_observer;
use preobs_core::pebo::{build_regressor, estimate_theta, estimate_theta_weighted, propagate_noise, run_extension};
use preobs_core::{Error, Result, Rotation, TimeGrid};

const DT: f64 = 1e-3;

#[derive(Debug, Clone, Serialize)]
pub struct ObserverSeries {
    pub keyframe_times: Vec<f64>,
    pub error_norm: Vec<f64>,
    pub trace_p: Vec<f64>,
    pub settling_keyframe: Option<usize>,
}

/// Hybrid observer on a damped oscillator with a periodically varying stiffness,
/// keyframe gaps drawn uniformly from `[min_gap, max_gap]` seconds.
pub fn observer_series(min_gap: f64, max_gap: f64, horizon: f64, seed: u64) -> Result<ObserverSeries> {
    if !(min_gap >= DT && max_gap >= min_gap && horizon > max_gap) {
        return Err(Error::InvalidInput(format!(
            "need {DT} <= min_gap <= max_gap < horizon, got {min_gap}, {max_gap}, {horizon}"
        )));
    }
    let steps = (horizon / DT).round() as usize;
    let (lo, hi) = ((min_gap / DT).round() as usize, (max_gap / DT).round() as usize);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut kf = vec![0];
    loop {
        let next = kf.last().unwrap() + rng.gen_range(lo..=hi);
        if next > steps {
            break;
        }
        kf.push(next);
    }
    let grid = TimeGrid::new(0.0, DT, steps, kf)?;
    let a = MatrixFn::Sinusoid {
        offset: DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -1.0, -0.2]),
        harmonics: vec![Harmonic { amplitude: DMatrix::from_row_slice(2, 2, &[0.0, 0.0, -0.5, 0.0]), freq: 1.0, phase: 0.0 }],
    };
    let model = LtvModel::new(
        a,
        MatrixFn::Constant(DMatrix::from_column_slice(2, 1, &[0.0, 1.0])),
        MatrixFn::Constant(DMatrix::from_row_slice(1, 2, &[1.0, 0.0])),
        MatrixFn::zeros(1, 1),
    )?;
    let x0 = DVector::from_vec(vec![1.0, 0.0]);
    let u = SignalTrajectory::sample(&grid, |t| DVector::from_element(1, (0.7 * t).sin()));
    let truth = simulate(&model, &x0, &u)?;
    let meas = sample_measurements(&model, &truth, &u, &DMatrix::zeros(1, 1), &DMatrix::zeros(1, 1), 0)?;
    let eye = DMatrix::<f64>::identity(2, 2);
    let guess = &x0 + DVector::from_vec(vec![6.0, 8.0]);
    let run = run_observer(&model, &u, &meas, &guess, &(&eye * 100.0), &(&eye * 1e-6), &DMatrix::from_element(1, 1, 1e-2), Some(&truth))?;
    Ok(ObserverSeries {
        keyframe_times: grid.keyframe_times(),
        error_norm: run.log.iter().map(|r| r.error_norm.unwrap_or(f64::NAN)).collect(),
        trace_p: run.log.iter().map(|r| r.trace_p).collect(),
        settling_keyframe: run.settling_keyframe(1e-3),
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct ExpApproxPoint {
    pub gap: f64,
    /// Angle between the chained exact and exp-approximated rotation increments.
    pub discrepancy: f64,
}

/// Chained rotation preintegral discrepancy over `[0, horizon]` for
/// `omega = (sin t, 0, cos t)` at each keyframe gap.
pub fn exp_approx_sweep(gaps: &[f64], horizon: f64) -> Result<Vec<ExpApproxPoint>> {
    let col = |v: [f64; 3]| DMatrix::from_column_slice(3, 1, &v);
    let spec = RigidBodySpec {
        omega: MatrixFn::Sinusoid {
            offset: col([0.0; 3]),
            harmonics: vec![
                Harmonic { amplitude: col([1.0, 0.0, 0.0]), freq: 1.0, phase: 0.0 },
                Harmonic { amplitude: col([0.0, 0.0, 1.0]), freq: 1.0, phase: FRAC_PI_2 },
            ],
        },
        accel: MatrixFn::zeros(3, 1),
        initial: ExtendedPose::identity(),
        gravity: gravity(),
    };
    let steps = (horizon / DT).round() as usize;
    gaps.iter()
        .map(|&gap| {
            let every = (gap / DT).round() as usize;
            if every == 0 || steps % every != 0 {
                return Err(Error::InvalidInput(format!("gap {gap} must divide horizon {horizon} in steps of {DT}")));
            }
            let grid = TimeGrid::uniform(0.0, DT, steps, every)?;
            let truth = simulate_rigid_body(&spec, &grid)?;
            let chain = |m| -> Result<Rotation> {
                Ok(preintegrate_keyframes(&truth.imu, &ImuBias::default(), m)?
                    .iter()
                    .fold(Rotation::identity(), |acc, s| acc * s.delta_r))
            };
            let discrepancy = chain(PreintMethod::ExactSubstep)?.angle_to(&chain(PreintMethod::ExpApprox)?);
            Ok(ExpApproxPoint { gap, discrepancy })
        })
        .collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct CovarianceStudy {
    pub trials: usize,
    /// `x(t_end) - xi(t_end)` per trial.
    pub deviations: Vec<f64>,
    pub sample_variance: f64,
    pub pi: f64,
    pub theta_rmse_plain: f64,
    pub theta_rmse_weighted: f64,
}

/// Monte Carlo on `x' = -0.3 x + u` with noisy input and output, comparing the
/// spread of `x - xi` at the horizon with the propagated `Pi`.
pub fn covariance_study(trials: usize, sigma_u: f64, sigma_y: f64, seed: u64) -> Result<CovarianceStudy> {
    if trials < 2 || !(sigma_u > 0.0 && sigma_y > 0.0) {
        return Err(Error::InvalidInput("need at least 2 trials and positive noise levels".into()));
    }
    let grid = TimeGrid::uniform(0.0, 0.01, 500, 25)?;
    let one = |v: f64| DMatrix::from_element(1, 1, v);
    let model = LtvModel::new(MatrixFn::Constant(one(-0.3)), MatrixFn::identity(1), MatrixFn::identity(1), MatrixFn::zeros(1, 1))?;
    let x0 = DVector::from_element(1, 2.0);
    let u = SignalTrajectory::sample(&grid, |t| DVector::from_element(1, 0.5 + (2.0 * t).sin()));
    let truth = simulate(&model, &x0, &u)?;
    let (su, sy) = (one(sigma_u * sigma_u), one(sigma_y * sigma_y));
    let budget = propagate_noise(&model, &grid, &su, &sy)?;
    let last = grid.n_steps();
    let mut deviations = Vec::with_capacity(trials);
    let (mut plain, mut weighted) = (0.0, 0.0);
    for i in 0..trials {
        let meas = sample_measurements(&model, &truth, &u, &su, &sy, derive_seed(seed, i as u64))?;
        let ext = run_extension(&model, &meas.u, &x0)?;
        let reg = build_regressor(&meas, &ext, &model)?;
        plain += (estimate_theta(&reg, &vec![1.0; reg.len()])?[0] - x0[0]).powi(2);
        weighted += (estimate_theta_weighted(&reg, &budget, &model, reg.len())?.theta[0] - x0[0]).powi(2);
        deviations.push(truth.values[last][0] - ext.xi[last][0]);
    }
    let m = trials as f64;
    let mean = deviations.iter().sum::<f64>() / m;
    let sample_variance = deviations.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (m - 1.0);
    Ok(CovarianceStudy {
        trials,
        deviations,
        sample_variance,
        pi: budget.pi[last][(0, 0)],
        theta_rmse_plain: (plain / m).sqrt(),
        theta_rmse_weighted: (weighted / m).sqrt(),
    })
}

fn to_json<T: Serialize>(r: Result<T>) -> String {
    match r {
        Ok(v) => serde_json::to_string(&v).unwrap_or_else(|e| format!("{{\"error\":\"{e}\"}}")),
        Err(e) => serde_json::json!({ "error": e.to_string() }).to_string(),
    }
}

#[wasm_bindgen]
pub fn observer_convergence(min_gap: f64, max_gap: f64, horizon: f64, seed: u32) -> String {
    to_json(observer_series(min_gap, max_gap, horizon, seed as u64))
}

#[wasm_bindgen]
pub fn exp_approx_error(horizon: f64, gaps: Vec<f64>) -> String {
    to_json(exp_approx_sweep(&gaps, horizon))
}

#[wasm_bindgen]
pub fn noise_covariance(trials: u32, sigma_u: f64, sigma_y: f64, seed: u32) -> String {
    to_json(covariance_study(trials as usize, sigma_u, sigma_y, seed as u64))
}
