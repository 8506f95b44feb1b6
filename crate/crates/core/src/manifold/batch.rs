//! Keyframe batch estimation from IMU preintegrals and landmark measurements.

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::so3::{exp, hat, procrustes, Rotation};

use super::imu::{propagate_keyframe, PreintegralSO3};
use super::landmarks::{LandmarkMode, LandmarkObservations};
use super::lm::{levenberg_marquardt, nullspace_dim, JacobianPair, LeastSquaresProblem, LmOptions, LmReport};
use super::ExtendedPose;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BatchMode {
    /// Keyframe states are free and the kinematics enter as weighted residuals.
    #[default]
    Soft,
    /// Only the first keyframe is free; the rest follow the kinematics exactly.
    Hard,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PreintegrationOptions {
    pub lm: LmOptions,
    pub mode: BatchMode,
    pub gravity: Vector3<f64>,
    pub sigma_r: Matrix3<f64>,
    pub sigma_v: Matrix3<f64>,
    pub sigma_p: Matrix3<f64>,
    /// Keyframes whose landmark measurements enter the cost; defaults to the
    /// number of preintegrals.
    pub count: Option<usize>,
    pub initial: Option<Vec<ExtendedPose>>,
    pub initial_landmarks: Option<Vec<Vector3<f64>>>,
}

impl Default for PreintegrationOptions {
    fn default() -> Self {
        Self {
            lm: LmOptions::default(),
            mode: BatchMode::Soft,
            gravity: super::gravity(),
            sigma_r: Matrix3::identity() * 1e-6,
            sigma_v: Matrix3::identity() * 1e-6,
            sigma_p: Matrix3::identity() * 1e-6,
            count: None,
            initial: None,
            initial_landmarks: None,
        }
    }
}

impl PreintegrationOptions {
    /// Same scalar variance on all three kinematic residuals.
    pub fn with_kinematic_variance(mut self, s: f64) -> Self {
        self.sigma_r = Matrix3::identity() * s;
        self.sigma_v = Matrix3::identity() * s;
        self.sigma_p = Matrix3::identity() * s;
        self
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PreintegrationEstimate {
    pub poses: Vec<ExtendedPose>,
    pub landmarks: Vec<Vector3<f64>>,
    pub cost: f64,
    pub nullspace: usize,
    pub report: LmReport,
}

fn whiten3(s: &Matrix3<f64>, name: &str) -> Result<Matrix3<f64>> {
    let l = crate::linalg::whitening(&DMatrix::from_column_slice(3, 3, s.as_slice()), name)?;
    Ok(Matrix3::from_column_slice(l.as_slice()))
}

fn v3(d: &DVector<f64>, at: usize) -> Vector3<f64> {
    Vector3::new(d[at], d[at + 1], d[at + 2])
}

fn retract_pose(x: &ExtendedPose, d: &DVector<f64>, at: usize) -> ExtendedPose {
    ExtendedPose {
        r: (x.r * exp(&v3(d, at))).renormalized(),
        v: x.v + v3(d, at + 3),
        p: x.p + v3(d, at + 6),
    }
}

struct Shared<'a> {
    pre: &'a [PreintegralSO3],
    y: &'a [Vec<Vector3<f64>>],
    ly: Matrix3<f64>,
    l: [Matrix3<f64>; 3],
    g: Vector3<f64>,
    known: Option<&'a [Vector3<f64>]>,
}

impl Shared<'_> {
    fn m(&self) -> usize {
        self.y[0].len()
    }

    fn n_landmark_params(&self) -> usize {
        if self.known.is_some() {
            0
        } else {
            3 * self.m()
        }
    }

    fn landmark<'b>(&'b self, free: &'b [Vector3<f64>], i: usize) -> &'b Vector3<f64> {
        match self.known {
            Some(p) => &p[i],
            None => &free[i],
        }
    }

    fn retract_landmarks(&self, lm: &[Vector3<f64>], d: &DVector<f64>, at: usize) -> Vec<Vector3<f64>> {
        if self.known.is_some() {
            return lm.to_vec();
        }
        lm.iter().enumerate().map(|(i, p)| p + v3(d, at + 3 * i)).collect()
    }

    /// Whitened landmark residuals of keyframes `0..y.len()`.
    fn landmark_residuals(&self, poses: &[ExtendedPose], free: &[Vector3<f64>], r: &mut DVector<f64>) {
        let m = self.m();
        for (k, yk) in self.y.iter().enumerate() {
            let rt = poses[k].r.matrix().transpose();
            for i in 0..m {
                let e = yk[i] - rt * (self.landmark(free, i) - poses[k].p);
                r.fixed_rows_mut::<3>(3 * (k * m + i)).copy_from(&(self.ly * e));
            }
        }
    }
}

#[derive(Debug, Clone)]
struct SoftParams {
    poses: Vec<ExtendedPose>,
    landmarks: Vec<Vector3<f64>>,
}

struct SoftProblem<'a>(Shared<'a>);

impl LeastSquaresProblem for SoftProblem<'_> {
    type Params = SoftParams;

    fn tangent_dim(&self, x: &SoftParams) -> usize {
        9 * x.poses.len() + self.0.n_landmark_params()
    }

    fn residual(&self, x: &SoftParams) -> DVector<f64> {
        let s = &self.0;
        let nl = 3 * s.m() * s.y.len();
        let mut r = DVector::zeros(nl + 15 * s.pre.len());
        s.landmark_residuals(&x.poses, &x.landmarks, &mut r);
        for (k, pre) in s.pre.iter().enumerate() {
            let (a, b) = (&x.poses[k], &x.poses[k + 1]);
            let row = nl + 15 * k;
            let e = b.r.matrix() - a.r.matrix() * pre.delta_r.matrix();
            for j in 0..3 {
                r.fixed_rows_mut::<3>(row + 3 * j).copy_from(&(s.l[0] * e.column(j)));
            }
            let pred = propagate_keyframe(a, pre, &s.g);
            r.fixed_rows_mut::<3>(row + 9).copy_from(&(s.l[1] * (pred.v - b.v)));
            r.fixed_rows_mut::<3>(row + 12).copy_from(&(s.l[2] * (pred.p - b.p)));
        }
        r
    }

    fn jacobian(&self, x: &SoftParams) -> DMatrix<f64> {
        let s = &self.0;
        let m = s.m();
        let nl = 3 * m * s.y.len();
        let lm0 = 9 * x.poses.len();
        let mut j = DMatrix::zeros(nl + 15 * s.pre.len(), self.tangent_dim(x));
        for k in 0..s.y.len() {
            let rk = x.poses[k].r.matrix();
            for i in 0..m {
                let row = 3 * (k * m + i);
                let w = rk.transpose() * (s.landmark(&x.landmarks, i) - x.poses[k].p);
                j.fixed_view_mut::<3, 3>(row, 9 * k).copy_from(&(-s.ly * hat(&w)));
                j.fixed_view_mut::<3, 3>(row, 9 * k + 6).copy_from(&(s.ly * rk.transpose()));
                if s.known.is_none() {
                    j.fixed_view_mut::<3, 3>(row, lm0 + 3 * i).copy_from(&(-s.ly * rk.transpose()));
                }
            }
        }
        let eye = Matrix3::identity();
        for (k, pre) in s.pre.iter().enumerate() {
            let row = nl + 15 * k;
            let (ca, cb) = (9 * k, 9 * (k + 1));
            let ra = x.poses[k].r.matrix();
            let rb = x.poses[k + 1].r.matrix();
            let dr = pre.delta_r.matrix();
            for c in 0..3 {
                let ej = Vector3::ith(c, 1.0);
                j.fixed_view_mut::<3, 3>(row + 3 * c, cb).copy_from(&(-s.l[0] * rb * hat(&ej)));
                j.fixed_view_mut::<3, 3>(row + 3 * c, ca).copy_from(&(s.l[0] * ra * hat(&(dr * ej))));
            }
            let dt = pre.dt();
            j.fixed_view_mut::<3, 3>(row + 9, ca).copy_from(&(-s.l[1] * ra * hat(&pre.delta_v)));
            j.fixed_view_mut::<3, 3>(row + 9, ca + 3).copy_from(&s.l[1]);
            j.fixed_view_mut::<3, 3>(row + 9, cb + 3).copy_from(&(-s.l[1]));
            j.fixed_view_mut::<3, 3>(row + 12, ca).copy_from(&(-s.l[2] * ra * hat(&pre.delta_p)));
            j.fixed_view_mut::<3, 3>(row + 12, ca + 3).copy_from(&(s.l[2] * eye * dt));
            j.fixed_view_mut::<3, 3>(row + 12, ca + 6).copy_from(&s.l[2]);
            j.fixed_view_mut::<3, 3>(row + 12, cb + 6).copy_from(&(-s.l[2]));
        }
        j
    }

    fn retract(&self, x: &SoftParams, d: &DVector<f64>) -> SoftParams {
        let poses = x.poses.iter().enumerate().map(|(k, p)| retract_pose(p, d, 9 * k)).collect();
        let landmarks = self.0.retract_landmarks(&x.landmarks, d, 9 * x.poses.len());
        SoftParams { poses, landmarks }
    }
}

#[derive(Debug, Clone)]
struct HardParams {
    x0: ExtendedPose,
    landmarks: Vec<Vector3<f64>>,
}

struct HardProblem<'a>(Shared<'a>);

impl HardProblem<'_> {
    fn chain(&self, x0: &ExtendedPose) -> Vec<ExtendedPose> {
        let mut out = vec![*x0];
        for pre in self.0.pre {
            let next = propagate_keyframe(out.last().unwrap(), pre, &self.0.g);
            out.push(next);
        }
        out
    }
}

impl LeastSquaresProblem for HardProblem<'_> {
    type Params = HardParams;

    fn tangent_dim(&self, _: &HardParams) -> usize {
        9 + self.0.n_landmark_params()
    }

    fn residual(&self, x: &HardParams) -> DVector<f64> {
        let s = &self.0;
        let mut r = DVector::zeros(3 * s.m() * s.y.len());
        s.landmark_residuals(&self.chain(&x.x0), &x.landmarks, &mut r);
        r
    }

    fn jacobian(&self, x: &HardParams) -> DMatrix<f64> {
        let s = &self.0;
        let m = s.m();
        let poses = self.chain(&x.x0);
        let mut j = DMatrix::zeros(3 * m * s.y.len(), self.tangent_dim(x));
        // tangent sensitivities of keyframe k with respect to (dR0, v0, p0)
        let mut jr = DMatrix::<f64>::zeros(3, 9);
        let mut jv = DMatrix::<f64>::zeros(3, 9);
        let mut jp = DMatrix::<f64>::zeros(3, 9);
        jr.view_mut((0, 0), (3, 3)).copy_from(&Matrix3::identity());
        jv.view_mut((0, 3), (3, 3)).copy_from(&Matrix3::identity());
        jp.view_mut((0, 6), (3, 3)).copy_from(&Matrix3::identity());
        let to_d = |m3: Matrix3<f64>| DMatrix::from_column_slice(3, 3, m3.as_slice());
        for k in 0..s.y.len() {
            let rk = poses[k].r.matrix();
            let ly = to_d(s.ly);
            for i in 0..m {
                let row = 3 * (k * m + i);
                let w = rk.transpose() * (s.landmark(&x.landmarks, i) - poses[k].p);
                let block = -&ly * to_d(hat(&w)) * &jr + &ly * to_d(rk.transpose()) * &jp;
                j.view_mut((row, 0), (3, 9)).copy_from(&block);
                if s.known.is_none() {
                    j.fixed_view_mut::<3, 3>(row, 9 + 3 * i).copy_from(&(-s.ly * rk.transpose()));
                }
            }
            if k < s.pre.len() {
                let pre = &s.pre[k];
                let dt = pre.dt();
                let njv = &jv - to_d(rk * hat(&pre.delta_v)) * &jr;
                let njp = &jp + &jv * dt - to_d(rk * hat(&pre.delta_p)) * &jr;
                jr = to_d(pre.delta_r.matrix().transpose()) * &jr;
                jv = njv;
                jp = njp;
            }
        }
        j
    }

    fn retract(&self, x: &HardParams, d: &DVector<f64>) -> HardParams {
        HardParams { x0: retract_pose(&x.x0, d, 0), landmarks: self.0.retract_landmarks(&x.landmarks, d, 9) }
    }
}

/// Pose from known landmarks by orthogonal Procrustes on centred coordinates.
pub fn pose_from_landmarks(y: &[Vector3<f64>], landmarks: &[Vector3<f64>]) -> Result<(Rotation, Vector3<f64>)> {
    let m = landmarks.len() as f64;
    let pbar = landmarks.iter().sum::<Vector3<f64>>() / m;
    let ybar = y.iter().sum::<Vector3<f64>>() / m;
    let mut h = Matrix3::zeros();
    for (yi, pi) in y.iter().zip(landmarks) {
        h += (pi - pbar) * (yi - ybar).transpose();
    }
    let r = procrustes(&h)?;
    let p = pbar - r.matrix() * ybar;
    Ok((r, p))
}

fn initial_poses(pre: &[PreintegralSO3], y: &[Vec<Vector3<f64>>], lms: &[Vector3<f64>], g: &Vector3<f64>) -> Result<Vec<ExtendedPose>> {
    let count = y.len();
    let mut poses: Vec<ExtendedPose> = y
        .iter()
        .map(|yk| pose_from_landmarks(yk, lms).map(|(r, p)| ExtendedPose::new(r, Vector3::zeros(), p)))
        .collect::<Result<_>>()?;
    for k in 0..count.saturating_sub(1) {
        let dt = pre[k].dt();
        let (a, b) = (poses[k], poses[k + 1]);
        poses[k].v = (b.p - a.p - g * (0.5 * dt * dt) - a.r.matrix() * pre[k].delta_p) / dt;
    }
    if count >= 2 {
        let k = count - 2;
        poses[k + 1].v = poses[k].v + poses[k].r.matrix() * pre[k].delta_v + g * pre[k].dt();
    }
    while poses.len() < pre.len() + 1 {
        let k = poses.len() - 1;
        let next = propagate_keyframe(&poses[k], &pre[k], g);
        poses.push(next);
    }
    Ok(poses)
}

fn build_shared<'a>(
    pre: &'a [PreintegralSO3],
    obs: &'a LandmarkObservations,
    mode: &'a LandmarkMode,
    opts: &PreintegrationOptions,
) -> Result<Shared<'a>> {
    obs.validate()?;
    if pre.is_empty() {
        return Err(Error::InvalidInput("at least one preintegral is required".into()));
    }
    let count = opts.count.unwrap_or(pre.len()).max(1);
    if count > obs.n_keyframes() || count > pre.len() + 1 {
        return Err(Error::Shape(format!("{count} keyframes requested, {} observed", obs.n_keyframes())));
    }
    let known = match mode {
        LandmarkMode::Known(p) => {
            if p.len() != obs.n_landmarks() {
                return Err(Error::Shape("landmark count does not match the observations".into()));
            }
            Some(p.as_slice())
        }
        LandmarkMode::Unknown => None,
    };
    Ok(Shared {
        pre,
        y: &obs.y[..count],
        ly: obs.whitening()?,
        l: [whiten3(&opts.sigma_r, "Sigma_R")?, whiten3(&opts.sigma_v, "Sigma_v")?, whiten3(&opts.sigma_p, "Sigma_p")?],
        g: opts.gravity,
        known,
    })
}

/// Jacobians of the soft or hard cost (per `opts.mode`) at the given keyframe
/// poses and free landmarks; the hard cost only reads the first pose.
pub fn preintegration_jacobians(
    pre: &[PreintegralSO3],
    obs: &LandmarkObservations,
    mode: &LandmarkMode,
    opts: &PreintegrationOptions,
    poses: &[ExtendedPose],
    landmarks: &[Vector3<f64>],
    h: f64,
) -> Result<JacobianPair> {
    let shared = build_shared(pre, obs, mode, opts)?;
    let landmarks = if shared.known.is_some() { Vec::new() } else { landmarks.to_vec() };
    if shared.known.is_none() && landmarks.len() != obs.n_landmarks() {
        return Err(Error::Shape("landmark point has the wrong length".into()));
    }
    match opts.mode {
        BatchMode::Soft => {
            if poses.len() != pre.len() + 1 {
                return Err(Error::Shape(format!("soft cost needs {} poses", pre.len() + 1)));
            }
            Ok(JacobianPair::evaluate(&SoftProblem(shared), &SoftParams { poses: poses.to_vec(), landmarks }, h))
        }
        BatchMode::Hard => {
            let x0 = *poses.first().ok_or_else(|| Error::Shape("hard cost needs a first pose".into()))?;
            Ok(JacobianPair::evaluate(&HardProblem(shared), &HardParams { x0, landmarks }, h))
        }
    }
}

/// Joint keyframe estimate from preintegrals and landmark measurements.
pub fn solve_manifold_preintegration(
    pre: &[PreintegralSO3],
    obs: &LandmarkObservations,
    mode: &LandmarkMode,
    opts: &PreintegrationOptions,
) -> Result<PreintegrationEstimate> {
    let shared = build_shared(pre, obs, mode, opts)?;
    let known = shared.known;
    let count = shared.y.len();
    let free_landmarks = match (known, &opts.initial_landmarks) {
        (Some(_), _) => Vec::new(),
        (None, Some(l)) if l.len() == obs.n_landmarks() => l.clone(),
        (None, Some(_)) => return Err(Error::Shape("initial landmark guess has the wrong length".into())),
        (None, None) => return Err(Error::InvalidInput("unknown landmarks need an initial guess".into())),
    };
    let guess = match (&opts.initial, known) {
        (Some(p), _) if p.len() == pre.len() + 1 => p.clone(),
        (Some(_), _) => return Err(Error::Shape(format!("initial guess needs {} poses", pre.len() + 1))),
        (None, Some(lms)) => initial_poses(pre, &obs.y[..count], lms, &opts.gravity)?,
        (None, None) => return Err(Error::InvalidInput("unknown landmarks need an initial pose guess".into())),
    };
    match opts.mode {
        BatchMode::Soft => {
            let problem = SoftProblem(shared);
            let x0 = SoftParams { poses: guess, landmarks: free_landmarks };
            let (x, report) = levenberg_marquardt(&problem, &x0, &opts.lm)?;
            let nullspace = nullspace_dim(&problem.jacobian(&x), 1e-9);
            let landmarks = known.map(|p| p.to_vec()).unwrap_or(x.landmarks);
            Ok(PreintegrationEstimate { poses: x.poses, landmarks, cost: report.cost, nullspace, report })
        }
        BatchMode::Hard => {
            let problem = HardProblem(shared);
            let x0 = HardParams { x0: guess[0], landmarks: free_landmarks };
            let (x, report) = levenberg_marquardt(&problem, &x0, &opts.lm)?;
            let nullspace = nullspace_dim(&problem.jacobian(&x), 1e-9);
            let poses = problem.chain(&x.x0);
            let landmarks = known.map(|p| p.to_vec()).unwrap_or(x.landmarks);
            Ok(PreintegrationEstimate { poses, landmarks, cost: report.cost, nullspace, report })
        }
    }
}
