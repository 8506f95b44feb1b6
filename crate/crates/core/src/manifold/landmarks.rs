//! Body-frame landmark bearings-with-range measurements.

use nalgebra::{DMatrix, Matrix3, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::linalg::{check_psd, psd_sqrt};
use crate::ltv::standard_normal;

use super::ExtendedPose;

/// Whether landmark positions are given or estimated.
#[derive(Debug, Clone, PartialEq)]
pub enum LandmarkMode {
    Known(Vec<Vector3<f64>>),
    /// Estimated jointly; only their count is needed.
    Unknown,
}

/// `y[k][i] = R_k^T (p_i - p_k) + noise` at each keyframe.
#[derive(Debug, Clone, PartialEq)]
pub struct LandmarkObservations {
    pub y: Vec<Vec<Vector3<f64>>>,
    pub sigma: Matrix3<f64>,
}

impl LandmarkObservations {
    pub fn n_landmarks(&self) -> usize {
        self.y.first().map_or(0, |v| v.len())
    }

    pub fn n_keyframes(&self) -> usize {
        self.y.len()
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.n_landmarks();
        if self.y.iter().any(|v| v.len() != m) {
            return Err(Error::Shape("every keyframe must observe every landmark".into()));
        }
        if m == 0 {
            return Err(Error::InvalidInput("no landmarks observed".into()));
        }
        Ok(())
    }

    /// `Sigma_y^{-1/2}`.
    pub fn whitening(&self) -> Result<Matrix3<f64>> {
        let l = crate::linalg::whitening(&DMatrix::from_column_slice(3, 3, self.sigma.as_slice()), "Sigma_y")?;
        Ok(Matrix3::from_column_slice(l.as_slice()))
    }
}

pub fn predict(pose: &ExtendedPose, landmark: &Vector3<f64>) -> Vector3<f64> {
    pose.r.matrix().transpose() * (landmark - pose.p)
}

pub fn sample_landmark_observations(
    poses: &[ExtendedPose],
    landmarks: &[Vector3<f64>],
    sigma: &Matrix3<f64>,
    seed: u64,
) -> Result<LandmarkObservations> {
    let s = DMatrix::from_column_slice(3, 3, sigma.as_slice());
    check_psd(&s, "Sigma_y")?;
    let l = psd_sqrt(&s);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let y = poses
        .iter()
        .map(|x| {
            landmarks
                .iter()
                .map(|p| {
                    let e = &l * standard_normal(&mut rng, 3);
                    predict(x, p) + Vector3::new(e[0], e[1], e[2])
                })
                .collect()
        })
        .collect();
    Ok(LandmarkObservations { y, sigma: *sigma })
}

/// A few well-spread landmarks around the origin.
pub fn default_landmarks() -> Vec<Vector3<f64>> {
    vec![
        Vector3::new(5.0, 0.0, 1.0),
        Vector3::new(-3.0, 4.0, -1.0),
        Vector3::new(0.0, -6.0, 2.0),
        Vector3::new(2.0, 3.0, 4.0),
        Vector3::new(-4.0, -2.0, 0.5),
    ]
}
