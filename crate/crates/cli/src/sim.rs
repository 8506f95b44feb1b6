//! Data generation shared by every command.

use std::path::Path;

use nalgebra::{DVector, Vector3};

use preobs_core::io::{fmt, write_imu_csv, write_pose_csv, write_series_csv};
use preobs_core::ltv::{derive_seed, sample_measurements, simulate, LtvModel, MeasurementSet, SignalTrajectory};
use preobs_core::manifold::imu::{ImuBias, ImuStream};
use preobs_core::manifold::kinematics::{simulate_rigid_body, RigidBodySpec, RigidBodyTruth};
use preobs_core::manifold::landmarks::{sample_landmark_observations, LandmarkObservations};

use crate::error::CliError;
use crate::scenario::{Scenario, System};

pub struct LtvData {
    pub model: LtvModel,
    pub x0: DVector<f64>,
    pub truth: SignalTrajectory,
    /// Noise-free input.
    pub u: SignalTrajectory,
    pub meas: MeasurementSet,
}

pub struct RigidData {
    pub spec: RigidBodySpec,
    pub truth: RigidBodyTruth,
    /// Measured IMU stream, biases and noise included.
    pub imu: ImuStream,
    pub bias: ImuBias,
    pub landmarks: Vec<Vector3<f64>>,
    pub obs: LandmarkObservations,
}

pub enum SimData {
    Ltv(LtvData),
    Rigid(RigidData),
}

pub fn ltv_input(input: &preobs_core::ltv::MatrixFn, grid: &preobs_core::TimeGrid) -> SignalTrajectory {
    SignalTrajectory::sample(grid, |t| input.eval(t).column(0).into_owned())
}

/// Truth plus one noisy measurement draw.
pub fn generate(scn: &Scenario, seed: u64) -> Result<SimData, CliError> {
    match &scn.system {
        System::Ltv { model, x0, input } => {
            let u = ltv_input(input, &scn.grid);
            let truth = simulate(model, x0, &u).map_err(|e| CliError::context("simulate", e))?;
            let meas = sample_measurements(model, &truth, &u, &scn.noise.sigma_u, &scn.noise.sigma_y, seed)
                .map_err(|e| CliError::context("measurements", e))?;
            Ok(SimData::Ltv(LtvData { model: model.clone(), x0: x0.clone(), truth, u, meas }))
        }
        System::RigidBody { spec, landmarks, bias } => {
            let truth = simulate_rigid_body(spec, &scn.grid).map_err(|e| CliError::context("simulate", e))?;
            let imu = truth
                .imu
                .corrupted(bias, &scn.noise.gyro, &scn.noise.accel, derive_seed(seed, 0))
                .map_err(|e| CliError::context("imu", e))?;
            let obs = sample_landmark_observations(&truth.keyframe_poses(), landmarks, &scn.noise.landmark, derive_seed(seed, 1))
                .map_err(|e| CliError::context("landmarks", e))?;
            Ok(SimData::Rigid(RigidData { spec: spec.clone(), truth, imu, bias: *bias, landmarks: landmarks.clone(), obs }))
        }
    }
}

fn write_landmark_csv(path: &Path, times: &[f64], obs: &LandmarkObservations) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["k", "t", "landmark", "yx", "yy", "yz"])?;
    for (k, (t, ys)) in times.iter().zip(&obs.y).enumerate() {
        for (i, y) in ys.iter().enumerate() {
            w.write_record([k.to_string(), fmt(*t), i.to_string(), fmt(y[0]), fmt(y[1]), fmt(y[2])])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Writes truth, inputs and measurements; returns the written file names.
pub fn write_data(data: &SimData, dir: &Path) -> Result<Vec<&'static str>, CliError> {
    std::fs::create_dir_all(dir)?;
    match data {
        SimData::Ltv(d) => {
            let grid = &d.truth.grid;
            let times: Vec<f64> = (0..grid.len()).map(|i| grid.time(i)).collect();
            write_series_csv(&dir.join("truth.csv"), "x", &times, &d.truth.values)?;
            write_series_csv(&dir.join("inputs.csv"), "u", &times, &d.meas.u.values)?;
            write_series_csv(&dir.join("measurements.csv"), "y", &grid.keyframe_times(), &d.meas.y)?;
            Ok(vec!["truth.csv", "inputs.csv", "measurements.csv"])
        }
        SimData::Rigid(d) => {
            let grid = &d.truth.grid;
            let times: Vec<f64> = (0..grid.len()).map(|i| grid.time(i)).collect();
            write_pose_csv(&dir.join("truth.csv"), &times, &d.truth.poses)?;
            write_imu_csv(&dir.join("imu.csv"), &d.imu)?;
            write_landmark_csv(&dir.join("measurements.csv"), &grid.keyframe_times(), &d.obs)?;
            Ok(vec!["truth.csv", "imu.csv", "measurements.csv"])
        }
    }
}
