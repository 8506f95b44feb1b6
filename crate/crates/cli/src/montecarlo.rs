//! Monte Carlo study of the plain and weighted PEBO on an LTV scenario.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::Serialize;

use preobs_core::io::{fmt, row_major, write_json};
use preobs_core::ltv::{derive_seed, sample_measurements, simulate, LtvModel, SignalTrajectory};
use preobs_core::pebo::{build_regressor, estimate_theta, estimate_theta_weighted, propagate_noise, reconstruct_state, run_extension, NoiseBudget};

use crate::error::CliError;
use crate::scenario::{Scenario, System};
use crate::sim::ltv_input;

pub const ESTIMATORS: [&str; 2] = ["pebo", "pebo-weighted"];
/// Above this failed-trial fraction the study is abandoned.
pub const MAX_FAILED_FRACTION: f64 = 0.1;

#[derive(Debug, Clone, Serialize)]
pub struct EstimatorStats {
    pub name: String,
    pub theta_rmse: f64,
    pub keyframe_rmse: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct Consistency {
    pub t: f64,
    pub sample_covariance: Vec<Vec<f64>>,
    pub pi: Vec<Vec<f64>>,
    /// `sample / Pi` on the diagonal.
    pub ratio: Vec<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct MonteCarloReport {
    pub scenario: String,
    pub seed: u64,
    pub trials: usize,
    pub failed: Vec<(usize, String)>,
    pub estimators: Vec<EstimatorStats>,
    /// Covariance of `x - xi` with `xi0 = x0`, against the propagated `Pi`.
    pub consistency: Vec<Consistency>,
}

struct Trial {
    /// `|theta_hat - x0|` per estimator.
    theta_err: [f64; 2],
    /// Mean squared keyframe error per estimator.
    kf_mse: [f64; 2],
    /// `x - xi` at the selected grid points.
    dev: Vec<DVector<f64>>,
}

struct Setup<'a> {
    model: &'a LtvModel,
    x0: &'a DVector<f64>,
    u: SignalTrajectory,
    truth: SignalTrajectory,
    budget: NoiseBudget,
    sigma_u: &'a DMatrix<f64>,
    sigma_y: &'a DMatrix<f64>,
    picks: Vec<usize>,
}

fn trial(s: &Setup<'_>, seed: u64) -> Result<Trial, CliError> {
    let meas = sample_measurements(s.model, &s.truth, &s.u, s.sigma_u, s.sigma_y, seed)?;
    let ext = run_extension(s.model, &meas.u, s.x0)?;
    let reg = build_regressor(&meas, &ext, s.model)?;
    let plain = estimate_theta(&reg, &vec![1.0; reg.len()])?;
    let weighted = estimate_theta_weighted(&reg, &s.budget, s.model, reg.len())?.theta;
    let truth_kf = s.truth.at_keyframes();
    let mse = |theta: &DVector<f64>| {
        let est = reconstruct_state(&ext, theta);
        est.iter().zip(&truth_kf).map(|(a, b)| (a - b).norm_squared()).sum::<f64>() / est.len() as f64
    };
    Ok(Trial {
        theta_err: [(&plain - s.x0).norm(), (&weighted - s.x0).norm()],
        kf_mse: [mse(&plain), mse(&weighted)],
        dev: s.picks.iter().map(|&i| &s.truth.values[i] - &ext.xi[i]).collect(),
    })
}

fn sample_covariance(xs: &[&DVector<f64>]) -> DMatrix<f64> {
    let n = xs[0].len();
    let mean = xs.iter().fold(DVector::zeros(n), |acc, x| acc + *x) / xs.len() as f64;
    let mut c = DMatrix::zeros(n, n);
    for x in xs {
        let d = *x - &mean;
        c += &d * d.transpose();
    }
    c / (xs.len() as f64 - 1.0)
}

pub fn run(scn: &Scenario, seed: u64, trials: usize, jobs: Option<usize>) -> Result<(MonteCarloReport, Vec<(usize, [f64; 2])>), CliError> {
    if trials < 2 {
        return Err(CliError::Validation(format!("--trials: need at least 2, got {trials}")));
    }
    let System::Ltv { model, x0, input } = &scn.system else {
        return Err(CliError::Validation("montecarlo needs an LTV scenario".into()));
    };
    let grid = &scn.grid;
    let u = ltv_input(input, grid);
    let truth = simulate(model, x0, &u)?;
    let budget = propagate_noise(model, grid, &scn.noise.sigma_u, &scn.noise.sigma_y)?;
    let kf = grid.keyframes();
    let mut picks = vec![kf[kf.len() / 2], grid.n_steps()];
    picks.dedup();
    let setup = Setup {
        model,
        x0,
        u,
        truth,
        budget,
        sigma_u: &scn.noise.sigma_u,
        sigma_y: &scn.noise.sigma_y,
        picks,
    };
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(j) = jobs {
        pool = pool.num_threads(j);
    }
    let pool = pool.build().map_err(|e| CliError::Validation(format!("--jobs: {e}")))?;
    let results: Vec<Result<Trial, CliError>> =
        pool.install(|| (0..trials).into_par_iter().map(|i| trial(&setup, derive_seed(seed, i as u64))).collect());

    let mut failed = Vec::new();
    let mut ok = Vec::new();
    for (i, r) in results.into_iter().enumerate() {
        match r {
            Ok(t) => ok.push((i, t)),
            Err(e) => failed.push((i, e.to_string())),
        }
    }
    if failed.len() as f64 > MAX_FAILED_FRACTION * trials as f64 {
        let first = failed.first().map(|f| f.1.clone()).unwrap_or_default();
        return Err(CliError::Numerical(format!("{} of {trials} trials failed; first: {first}", failed.len())));
    }
    if ok.len() < 2 {
        return Err(CliError::Numerical("fewer than two successful trials".into()));
    }
    let m = ok.len() as f64;
    let estimators = ESTIMATORS
        .iter()
        .enumerate()
        .map(|(j, name)| EstimatorStats {
            name: name.to_string(),
            theta_rmse: (ok.iter().map(|(_, t)| t.theta_err[j].powi(2)).sum::<f64>() / m).sqrt(),
            keyframe_rmse: (ok.iter().map(|(_, t)| t.kf_mse[j]).sum::<f64>() / m).sqrt(),
        })
        .collect();
    let consistency = setup
        .picks
        .iter()
        .enumerate()
        .map(|(p, &i)| {
            let xs: Vec<&DVector<f64>> = ok.iter().map(|(_, t)| &t.dev[p]).collect();
            let c = sample_covariance(&xs);
            let pi = &setup.budget.pi[i];
            Consistency {
                t: grid.time(i),
                ratio: (0..c.nrows()).map(|r| c[(r, r)] / pi[(r, r)]).collect(),
                sample_covariance: row_major(&c),
                pi: row_major(pi),
            }
        })
        .collect();
    let per_trial = ok.iter().map(|(i, t)| (*i, t.theta_err)).collect();
    Ok((MonteCarloReport { scenario: scn.name.clone(), seed, trials, failed, estimators, consistency }, per_trial))
}

/// Writes `montecarlo.csv` (trial, estimator, error) and `report.json`.
pub fn write(report: &MonteCarloReport, per_trial: &[(usize, [f64; 2])], dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir)?;
    let mut w = csv::Writer::from_path(dir.join("montecarlo.csv"))?;
    w.write_record(["trial", "estimator", "error"])?;
    for (i, errs) in per_trial {
        for (name, e) in ESTIMATORS.iter().zip(errs) {
            w.write_record([i.to_string(), name.to_string(), fmt(*e)])?;
        }
    }
    w.flush()?;
    write_json(&dir.join("report.json"), report)?;
    Ok(())
}
