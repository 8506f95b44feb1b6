//! Sampled IMU streams and on-manifold preintegration.

use nalgebra::{DMatrix, Matrix3, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::TimeGrid;
use crate::integrate::{integrate_final, OdeState, Span, Stage};
use crate::linalg::{check_psd, psd_sqrt};
use crate::ltv::standard_normal;
use crate::so3::{exp, hat, project, Rotation};

use super::kinematics::{NavState, REPROJECT_EVERY};
use super::ExtendedPose;

/// Gyro and accelerometer readings on the half-step grid `t0 + j dt / 2`.
///
/// Optional white noise is held constant over each fine step with covariance
/// `Sigma / dt`, so the three Runge–Kutta nodes of a step see the same draw.
#[derive(Debug, Clone, PartialEq)]
pub struct ImuStream {
    grid: TimeGrid,
    omega: Vec<Vector3<f64>>,
    accel: Vec<Vector3<f64>>,
    omega_noise: Vec<Vector3<f64>>,
    accel_noise: Vec<Vector3<f64>>,
}

/// Known sensor biases subtracted before integration.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ImuBias {
    pub gyro: Vector3<f64>,
    pub accel: Vector3<f64>,
}

impl ImuStream {
    pub fn noise_free(grid: TimeGrid, omega: Vec<Vector3<f64>>, accel: Vec<Vector3<f64>>) -> Result<Self> {
        let len = 2 * grid.n_steps() + 1;
        if omega.len() != len || accel.len() != len {
            return Err(Error::Shape(format!("IMU stream needs {len} half-step samples")));
        }
        let zeros = vec![Vector3::zeros(); grid.n_steps()];
        Ok(Self { grid, omega, accel, omega_noise: zeros.clone(), accel_noise: zeros })
    }

    /// Same readings with constant biases and white noise added.
    pub fn corrupted(
        &self,
        bias: &ImuBias,
        sigma_gyro: &Matrix3<f64>,
        sigma_accel: &Matrix3<f64>,
        seed: u64,
    ) -> Result<Self> {
        let sg = DMatrix::from_column_slice(3, 3, sigma_gyro.as_slice());
        let sa = DMatrix::from_column_slice(3, 3, sigma_accel.as_slice());
        check_psd(&sg, "Sigma_gyro")?;
        check_psd(&sa, "Sigma_accel")?;
        let lg = psd_sqrt(&(sg / self.grid.dt()));
        let la = psd_sqrt(&(sa / self.grid.dt()));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut omega_noise = Vec::with_capacity(self.grid.n_steps());
        let mut accel_noise = Vec::with_capacity(self.grid.n_steps());
        for _ in 0..self.grid.n_steps() {
            let g = &lg * standard_normal(&mut rng, 3);
            let a = &la * standard_normal(&mut rng, 3);
            omega_noise.push(Vector3::new(g[0], g[1], g[2]) + bias.gyro);
            accel_noise.push(Vector3::new(a[0], a[1], a[2]) + bias.accel);
        }
        Ok(Self { grid: self.grid.clone(), omega: self.omega.clone(), accel: self.accel.clone(), omega_noise, accel_noise })
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn half_len(&self) -> usize {
        self.omega.len()
    }

    /// Noise-free specific force at half index `j`.
    pub fn accel_half(&self, j: usize) -> Vector3<f64> {
        self.accel[j]
    }

    pub fn omega_half(&self, j: usize) -> Vector3<f64> {
        self.omega[j]
    }

    /// Measured `(omega, a)` seen by a Runge–Kutta stage.
    pub fn sample(&self, stage: Stage) -> (Vector3<f64>, Vector3<f64>) {
        let j = stage.half_index();
        (self.omega[j] + self.omega_noise[stage.step], self.accel[j] + self.accel_noise[stage.step])
    }

    /// Measured readings at fine grid point `i`, as logged.
    pub fn at_grid(&self, i: usize) -> (Vector3<f64>, Vector3<f64>) {
        let step = i.min(self.grid.n_steps().saturating_sub(1));
        let (wn, an) = if self.grid.n_steps() == 0 {
            (Vector3::zeros(), Vector3::zeros())
        } else {
            (self.omega_noise[step], self.accel_noise[step])
        };
        (self.omega[2 * i] + wn, self.accel[2 * i] + an)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PreintMethod {
    /// Integrates `dR' = dR hat(omega)` directly.
    #[default]
    ExactSubstep,
    /// Integrates the rotation vector `phi' = omega` and uses `Exp(phi)`.
    /// Only exact when the angular rate direction is constant over the segment.
    ExpApprox,
}

/// Preintegrated IMU increments over one keyframe interval.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreintegralSO3 {
    pub k: usize,
    pub delta_r: Rotation,
    pub delta_v: Vector3<f64>,
    pub delta_p: Vector3<f64>,
    pub t_start: f64,
    pub t_end: f64,
    pub method: PreintMethod,
}

impl PreintegralSO3 {
    pub fn dt(&self) -> f64 {
        self.t_end - self.t_start
    }
}

#[derive(Debug, Clone, PartialEq)]
struct PhiState {
    phi: Vector3<f64>,
    v: Vector3<f64>,
    p: Vector3<f64>,
}

impl OdeState for PhiState {
    fn add_scaled(&self, o: &Self, s: f64) -> Self {
        PhiState { phi: self.phi + o.phi * s, v: self.v + o.v * s, p: self.p + o.p * s }
    }

    fn is_finite(&self) -> bool {
        self.phi.iter().chain(self.v.iter()).chain(self.p.iter()).all(|x| x.is_finite())
    }
}

/// Increments `(dR, dv, dp)` between grid points `start` and `end`.
pub fn imu_preintegrate(
    imu: &ImuStream,
    bias: &ImuBias,
    k: usize,
    start: usize,
    end: usize,
    method: PreintMethod,
) -> Result<PreintegralSO3> {
    let span = Span::new(&imu.grid, start, end)?;
    let (delta_r, delta_v, delta_p) = match method {
        PreintMethod::ExactSubstep => {
            let x0 = NavState { r: Matrix3::identity(), v: Vector3::zeros(), p: Vector3::zeros() };
            let mut failure = None;
            let x = integrate_final(
                |st, x: &NavState| {
                    let (w, a) = imu.sample(st);
                    NavState { r: x.r * hat(&(w - bias.gyro)), v: x.r * (a - bias.accel), p: x.v }
                },
                &x0,
                span,
                |i, x| {
                    if (i - start) % REPROJECT_EVERY == 0 {
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
            (project(&x.r)?, x.v, x.p)
        }
        PreintMethod::ExpApprox => {
            let x0 = PhiState { phi: Vector3::zeros(), v: Vector3::zeros(), p: Vector3::zeros() };
            let x = integrate_final(
                |st, x: &PhiState| {
                    let (w, a) = imu.sample(st);
                    PhiState { phi: w - bias.gyro, v: exp(&x.phi).into_inner() * (a - bias.accel), p: x.v }
                },
                &x0,
                span,
                |_, _| {},
            )?;
            (exp(&x.phi), x.v, x.p)
        }
    };
    let g = &imu.grid;
    Ok(PreintegralSO3 { k, delta_r, delta_v, delta_p, t_start: g.time(start), t_end: g.time(end), method })
}

/// One preintegral per keyframe interval.
pub fn preintegrate_keyframes(imu: &ImuStream, bias: &ImuBias, method: PreintMethod) -> Result<Vec<PreintegralSO3>> {
    imu.grid
        .intervals()
        .enumerate()
        .map(|(k, (s, e))| imu_preintegrate(imu, bias, k, s, e, method))
        .collect()
}

/// Keyframe-to-keyframe kinematics.
pub fn propagate_keyframe(x: &ExtendedPose, pre: &PreintegralSO3, g: &Vector3<f64>) -> ExtendedPose {
    let dt = pre.dt();
    let r = x.r.matrix();
    ExtendedPose {
        r: (x.r * pre.delta_r).renormalized(),
        v: x.v + r * pre.delta_v + g * dt,
        p: x.p + x.v * dt + g * (0.5 * dt * dt) + r * pre.delta_p,
    }
}
