//! Scenario-driven front end for the `preobs-core` estimators.
//!
//! Each command takes a validated [`Scenario`](scenario::Scenario) and writes
//! plain CSV/JSON/text into one output directory.

pub mod error;
pub mod estimate;
pub mod montecarlo;
pub mod scenario;
pub mod sim;

use std::path::PathBuf;

use preobs_core::io::write_text;
use preobs_core::verify::{all_passed, format_table, run_registry, EuclidCase, ManifoldCase};

use error::CliError;
use estimate::{run_one, scenario_checks, select, EstimateReport};
use scenario::{Scenario, System};

/// Default Monte Carlo trial count when neither flag nor scenario sets one.
pub const DEFAULT_TRIALS: usize = 100;

#[derive(Debug, Clone, Default)]
pub struct Options {
    /// Output directory, used as is.
    pub out: Option<PathBuf>,
    /// Root under which `<scenario name>/` is created when `out` is unset.
    pub out_root: Option<PathBuf>,
    pub seed: Option<u64>,
    pub trials: Option<usize>,
    pub jobs: Option<usize>,
    pub estimator: Option<String>,
    pub tolerance: Option<f64>,
}

/// Text for stdout plus the process exit code.
#[derive(Debug, Clone)]
pub struct Outcome {
    pub text: String,
    pub exit_code: i32,
}

impl Outcome {
    fn ok(text: String) -> Self {
        Self { text, exit_code: 0 }
    }
}

pub fn output_dir(scn: &Scenario, opts: &Options) -> PathBuf {
    if let Some(d) = &opts.out {
        return d.clone();
    }
    if let Some(d) = &scn.output_dir {
        return d.clone();
    }
    opts.out_root.clone().unwrap_or_else(|| PathBuf::from("out")).join(&scn.name)
}

fn seed(scn: &Scenario, opts: &Options) -> u64 {
    opts.seed.unwrap_or(scn.noise.seed)
}

pub fn cmd_simulate(scn: &Scenario, opts: &Options) -> Result<Outcome, CliError> {
    let dir = output_dir(scn, opts);
    let data = sim::generate(scn, seed(scn, opts))?;
    let files = sim::write_data(&data, &dir)?;
    Ok(Outcome::ok(format!(
        "{}: {} steps, {} keyframes, wrote {} to {}",
        scn.name,
        scn.grid.n_steps(),
        scn.grid.keyframes().len(),
        files.join(", "),
        dir.display()
    )))
}

pub fn cmd_estimate(scn: &Scenario, opts: &Options) -> Result<Outcome, CliError> {
    let estimators = select(scn, opts.estimator.as_deref())?;
    let dir = output_dir(scn, opts);
    let seed = seed(scn, opts);
    let data = sim::generate(scn, seed)?;
    let reports: Vec<_> = estimators.iter().map(|&e| run_one(e, &data, &scn.estimator)).collect();
    let report = EstimateReport {
        scenario: scn.name.clone(),
        seed,
        keyframe_times: scn.grid.keyframe_times(),
        estimators: reports,
        checks: scenario_checks(&data, seed),
    };
    estimate::write_report(&report, &dir)?;
    let mut text = String::new();
    for r in &report.estimators {
        match (&r.error, r.max_error) {
            (Some(e), _) => text.push_str(&format!("{}: failed: {e}\n", r.name)),
            (None, Some(m)) => text.push_str(&format!("{}: max keyframe error {m:.3e} ({:.1} ms)\n", r.name, r.wall_time * 1e3)),
            (None, None) => text.push_str(&format!("{}: done\n", r.name)),
        }
    }
    text.push_str(&format!("wrote report.json, errors.csv, estimate.csv to {}", dir.display()));
    let failed: Vec<_> = report.estimators.iter().filter(|r| r.error.is_some()).collect();
    if let Some(f) = failed.first() {
        eprintln!("{text}");
        return Err(CliError::Numerical(format!("{}: {}", f.name, f.error.as_deref().unwrap_or(""))));
    }
    Ok(Outcome::ok(text))
}

fn euclid_case(scn: &Scenario) -> Option<EuclidCase> {
    match &scn.system {
        System::Ltv { model, x0, input } => {
            Some(EuclidCase { model: model.clone(), x0: x0.clone(), u: sim::ltv_input(input, &scn.grid) })
        }
        _ => None,
    }
}

fn manifold_case(scn: &Scenario) -> Option<ManifoldCase> {
    match &scn.system {
        System::RigidBody { spec, landmarks, .. } => Some(ManifoldCase::new(spec.clone(), scn.grid.clone(), landmarks.clone(), scn.noise.seed)),
        _ => None,
    }
}

/// Runs every registered identity on noise-free variants of the scenario and
/// of the bundled `ltv-sine` and `imu-circle` scenarios.
pub fn cmd_verify(scn: &Scenario, opts: &Options) -> Result<Outcome, CliError> {
    let mut scenarios = vec![scn.clone()];
    for name in ["ltv-sine", "imu-circle"] {
        if scn.name != name {
            scenarios.push(scenario::load(name)?);
        }
    }
    let euclid: Vec<_> = scenarios.iter().filter_map(euclid_case).collect();
    let manifold: Vec<_> = scenarios.iter().filter_map(manifold_case).collect();
    let outcomes = run_registry(&euclid, &manifold, opts.tolerance);
    let table = format_table(&outcomes);
    let dir = output_dir(scn, opts);
    std::fs::create_dir_all(&dir)?;
    write_text(&dir.join("verify.txt"), &table)?;
    let passed = all_passed(&outcomes);
    let verdict = if passed { "all checks passed" } else { "some checks FAILED" };
    Ok(Outcome { text: format!("{table}{verdict}"), exit_code: if passed { 0 } else { 4 } })
}

pub fn cmd_montecarlo(scn: &Scenario, opts: &Options) -> Result<Outcome, CliError> {
    let trials = opts.trials.or(scn.trials).unwrap_or(DEFAULT_TRIALS);
    let seed = seed(scn, opts);
    let (report, per_trial) = montecarlo::run(scn, seed, trials, opts.jobs)?;
    let dir = output_dir(scn, opts);
    montecarlo::write(&report, &per_trial, &dir)?;
    let mut text = format!("{}: {} trials, {} failed\n", scn.name, trials, report.failed.len());
    for e in &report.estimators {
        text.push_str(&format!("{:<14} theta RMSE {:.4e}  keyframe RMSE {:.4e}\n", e.name, e.theta_rmse, e.keyframe_rmse));
    }
    for c in &report.consistency {
        let r: Vec<String> = c.ratio.iter().map(|x| format!("{x:.3}")).collect();
        text.push_str(&format!("t = {:.3}: sample / Pi = [{}]\n", c.t, r.join(", ")));
    }
    text.push_str(&format!("wrote montecarlo.csv, report.json to {}", dir.display()));
    Ok(Outcome::ok(text))
}
