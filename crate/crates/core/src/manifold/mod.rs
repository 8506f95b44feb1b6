//! Rigid-body estimation on `SO(3) x R^n`.
//!
//! Conventions:
//!
//! * `R` maps body to inertial coordinates, `R' = R hat(omega)`.
//! * The body-frame PEBO parameterizes `R_t = Q_c Q_t` with `Q' = Q hat(omega)`,
//!   so `R Q^T` is constant along every trajectory.
//! * The body-frame position coordinate is the inertial origin seen from the
//!   body, `p_B = -R^T p_I`, which is what the extension's second block row
//!   `p_B' = -hat(omega) p_B - v_B` propagates.
//! * Landmarks are observed in the body frame, `y_i = R^T (p_i - p_I)`.

pub mod batch;
pub mod imu;
pub mod kinematics;
pub mod landmarks;
pub mod lm;
pub mod pebo;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::so3::Rotation;

pub use batch::{solve_manifold_preintegration, BatchMode, PreintegrationEstimate, PreintegrationOptions};
pub use imu::{imu_preintegrate, preintegrate_keyframes, propagate_keyframe, ImuStream, PreintMethod, PreintegralSO3};
pub use kinematics::{simulate_rigid_body, RigidBodySpec, RigidBodyTruth};
pub use landmarks::{sample_landmark_observations, LandmarkMode, LandmarkObservations};
pub use pebo::{
    reconstruct_manifold_state, run_manifold_extension, solve_manifold_pebo, ManifoldEstimate, ManifoldPeboExtension,
    PeboOptions, ReconstructedPose,
};

/// Gravity in the inertial frame, m/s^2.
pub fn gravity() -> Vector3<f64> {
    Vector3::new(0.0, 0.0, 9.8)
}

/// Attitude, inertial velocity and inertial position.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExtendedPose {
    pub r: Rotation,
    pub v: Vector3<f64>,
    pub p: Vector3<f64>,
}

impl ExtendedPose {
    pub fn new(r: Rotation, v: Vector3<f64>, p: Vector3<f64>) -> Self {
        Self { r, v, p }
    }

    pub fn identity() -> Self {
        Self { r: Rotation::identity(), v: Vector3::zeros(), p: Vector3::zeros() }
    }

    pub fn is_finite(&self) -> bool {
        self.r.matrix().iter().chain(self.v.iter()).chain(self.p.iter()).all(|x| x.is_finite())
    }

    /// Rotation, velocity and position distances to `other`.
    pub fn distance(&self, other: &ExtendedPose) -> PoseError {
        PoseError {
            rotation: self.r.angle_to(&other.r),
            velocity: (self.v - other.v).norm(),
            position: (self.p - other.p).norm(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PoseError {
    pub rotation: f64,
    pub velocity: f64,
    pub position: f64,
}

impl PoseError {
    pub fn max(self, other: PoseError) -> PoseError {
        PoseError {
            rotation: self.rotation.max(other.rotation),
            velocity: self.velocity.max(other.velocity),
            position: self.position.max(other.position),
        }
    }
}

/// Largest per-component discrepancy between two pose sequences.
pub fn max_pose_error(a: &[ExtendedPose], b: &[ExtendedPose]) -> PoseError {
    a.iter().zip(b).fold(PoseError::default(), |acc, (x, y)| acc.max(x.distance(y)))
}
