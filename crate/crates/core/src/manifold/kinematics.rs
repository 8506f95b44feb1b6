//! Ground-truth rigid-body trajectories and their noise-free IMU readings.

use nalgebra::{DMatrix, Matrix3, Vector3};

use crate::error::{Error, Result};
use crate::grid::TimeGrid;
use crate::integrate::{integrate_with, OdeState, Span};
use crate::ltv::{Harmonic, MatrixFn};
use crate::so3::{hat, project, Rotation};

use super::imu::ImuStream;
use super::{gravity, ExtendedPose};

/// Rotations are re-projected onto SO(3) every this many steps.
pub const REPROJECT_EVERY: usize = 100;

/// Body angular rate and inertial acceleration as functions of time, plus
/// the initial pose.
#[derive(Debug, Clone, PartialEq)]
pub struct RigidBodySpec {
    /// Body-frame angular rate, 3x1.
    pub omega: MatrixFn,
    /// Inertial acceleration `dv/dt`, 3x1.
    pub accel: MatrixFn,
    pub initial: ExtendedPose,
    pub gravity: Vector3<f64>,
}

impl RigidBodySpec {
    pub fn validate(&self) -> Result<()> {
        for (name, f) in [("omega", &self.omega), ("accel", &self.accel)] {
            if f.shape() != (3, 1) {
                return Err(Error::Shape(format!("{name} must be 3x1")));
            }
        }
        if !self.initial.is_finite() {
            return Err(Error::InvalidInput("initial pose is not finite".into()));
        }
        Ok(())
    }

    /// Level circle of radius `speed / rate` flown at constant yaw rate.
    pub fn circle(speed: f64, rate: f64) -> Self {
        let col = |x: f64, y: f64, z: f64| DMatrix::from_column_slice(3, 1, &[x, y, z]);
        let c = speed * rate;
        Self {
            omega: MatrixFn::Constant(col(0.0, 0.0, rate)),
            accel: MatrixFn::Sinusoid {
                offset: col(0.0, 0.0, 0.0),
                harmonics: vec![
                    Harmonic { amplitude: col(-c, 0.0, 0.0), freq: rate, phase: std::f64::consts::FRAC_PI_2 },
                    Harmonic { amplitude: col(0.0, -c, 0.0), freq: rate, phase: 0.0 },
                ],
            },
            initial: ExtendedPose::new(Rotation::identity(), Vector3::new(0.0, speed, 0.0), Vector3::zeros()),
            gravity: gravity(),
        }
    }

    pub fn omega_at(&self, t: f64) -> Vector3<f64> {
        col3(&self.omega.eval(t))
    }

    pub fn accel_at(&self, t: f64) -> Vector3<f64> {
        col3(&self.accel.eval(t))
    }
}

pub(crate) fn col3(m: &DMatrix<f64>) -> Vector3<f64> {
    Vector3::new(m[0], m[1], m[2])
}

/// Attitude, velocity, position as an integrable state.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct NavState {
    pub r: Matrix3<f64>,
    pub v: Vector3<f64>,
    pub p: Vector3<f64>,
}

impl OdeState for NavState {
    fn add_scaled(&self, o: &Self, s: f64) -> Self {
        NavState { r: self.r + o.r * s, v: self.v + o.v * s, p: self.p + o.p * s }
    }

    fn is_finite(&self) -> bool {
        self.r.iter().chain(self.v.iter()).chain(self.p.iter()).all(|x| x.is_finite())
    }
}

#[derive(Debug, Clone)]
pub struct RigidBodyTruth {
    pub grid: TimeGrid,
    /// Pose at every fine grid point.
    pub poses: Vec<ExtendedPose>,
    /// Noise-free readings at half-step resolution.
    pub imu: ImuStream,
    pub gravity: Vector3<f64>,
}

impl RigidBodyTruth {
    pub fn keyframe_poses(&self) -> Vec<ExtendedPose> {
        self.grid.keyframes().iter().map(|&i| self.poses[i]).collect()
    }
}

/// Integrates `R' = R hat(omega)`, `v' = a_I`, `p' = v` on the half-step grid
/// and records `omega` and specific force `R^T (a_I - g)` at every half step.
pub fn simulate_rigid_body(spec: &RigidBodySpec, grid: &TimeGrid) -> Result<RigidBodyTruth> {
    spec.validate()?;
    let half = Span { t0: grid.t0(), dt: 0.5 * grid.dt(), start: 0, end: 2 * grid.n_steps() };
    let x0 = NavState { r: *spec.initial.r.matrix(), v: spec.initial.v, p: spec.initial.p };
    let mut failure = None;
    let states = integrate_with(
        |st, x: &NavState| NavState { r: x.r * hat(&spec.omega_at(st.t)), v: spec.accel_at(st.t), p: x.v },
        &x0,
        half,
        |i, x| {
            if i % REPROJECT_EVERY == 0 || i == half.end {
                match project(&x.r) {
                    Ok(r) => x.r = r.into_inner(),
                    Err(e) => failure = Some(e),
                }
            }
        },
    )?;
    if let Some(e) = failure {
        return Err(e);
    }
    let mut omega = Vec::with_capacity(states.len());
    let mut accel = Vec::with_capacity(states.len());
    for (j, x) in states.iter().enumerate() {
        let t = half.time(j);
        omega.push(spec.omega_at(t));
        accel.push(x.r.transpose() * (spec.accel_at(t) - spec.gravity));
    }
    let poses = states
        .iter()
        .step_by(2)
        .map(|x| {
            let r = project(&x.r)?;
            Ok(ExtendedPose::new(r, x.v, x.p))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(RigidBodyTruth { grid: grid.clone(), poses, imu: ImuStream::noise_free(grid.clone(), omega, accel)?, gravity: spec.gravity })
}
