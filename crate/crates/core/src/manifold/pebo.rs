//! Body-frame parameter-estimation-based observer for rigid-body navigation.
//!
//! The body-frame state `eta = (v_B, p_B, g_c)` with `v_B = R^T v`,
//! `p_B = -R^T p` and constant `g_c = Q_c^T g` obeys a linear time-varying
//! system driven by the IMU once `R = Q_c Q` is split into a known `Q`
//! (integrated from the gyro) and a constant unknown `Q_c`. The extension
//! therefore reduces navigation to estimating `(Q_c, theta)` with
//! `theta = eta(t0)`.

use nalgebra::{DMatrix, DVector, Matrix3, SMatrix, SVector, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::TimeGrid;
use crate::integrate::{integrate_with, OdeState, Span};
use crate::linalg::{lstsq, RankPolicy};
use crate::so3::{exp, hat, procrustes, project, Rotation};

use super::imu::{ImuBias, ImuStream};
use super::kinematics::REPROJECT_EVERY;
use super::landmarks::{LandmarkMode, LandmarkObservations};
use super::lm::{levenberg_marquardt, nullspace_dim, JacobianPair, LeastSquaresProblem, LmOptions, LmReport};
use super::ExtendedPose;

pub type Vector9 = SVector<f64, 9>;
pub type Matrix9 = SMatrix<f64, 9, 9>;

#[derive(Debug, Clone, PartialEq)]
struct ExtState {
    q: Matrix3<f64>,
    xi: Vector9,
    omega: Matrix9,
}

impl OdeState for ExtState {
    fn add_scaled(&self, o: &Self, s: f64) -> Self {
        ExtState { q: self.q + o.q * s, xi: self.xi + o.xi * s, omega: self.omega + o.omega * s }
    }

    fn is_finite(&self) -> bool {
        self.q.iter().chain(self.xi.iter()).chain(self.omega.iter()).all(|x| x.is_finite())
    }
}

/// System matrix of the body-frame state for rate `w` and attitude factor `q`.
pub fn system_matrix(w: &Vector3<f64>, q: &Matrix3<f64>) -> Matrix9 {
    let mut a = Matrix9::zeros();
    let wx = hat(w);
    a.fixed_view_mut::<3, 3>(0, 0).copy_from(&(-wx));
    a.fixed_view_mut::<3, 3>(0, 6).copy_from(&q.transpose());
    a.fixed_view_mut::<3, 3>(3, 0).copy_from(&(-Matrix3::identity()));
    a.fixed_view_mut::<3, 3>(3, 3).copy_from(&(-wx));
    a
}

/// `Q`, `xi` and `Omega` on the fine grid.
#[derive(Debug, Clone)]
pub struct ManifoldPeboExtension {
    pub grid: TimeGrid,
    pub q: Vec<Rotation>,
    pub xi: Vec<Vector9>,
    pub omega: Vec<Matrix9>,
    pub xi0: Vector9,
}

impl ManifoldPeboExtension {
    pub fn keyframe_q(&self) -> Vec<Rotation> {
        self.grid.keyframes().iter().map(|&i| self.q[i]).collect()
    }

    /// Affine map `eta_k = s_k + S_k theta` at keyframe `k`.
    pub fn affine(&self, k: usize) -> (Vector9, Matrix9) {
        let i = self.grid.keyframes()[k];
        (self.xi[i] - self.omega[i] * self.xi0, self.omega[i])
    }
}

/// Integrates `Q' = Q hat(w)`, `xi' = A xi + (a, 0, 0)`, `Omega' = A Omega`.
pub fn run_manifold_extension(
    imu: &ImuStream,
    bias: &ImuBias,
    q0: &Rotation,
    xi0: &Vector9,
) -> Result<ManifoldPeboExtension> {
    let grid = imu.grid().clone();
    let x0 = ExtState { q: *q0.matrix(), xi: *xi0, omega: Matrix9::identity() };
    let mut failure = None;
    let keyframes = grid.keyframes().to_vec();
    let states = integrate_with(
        |st, x: &ExtState| {
            let (w, a) = imu.sample(st);
            let w = w - bias.gyro;
            let am = system_matrix(&w, &x.q);
            let mut forcing = Vector9::zeros();
            forcing.fixed_rows_mut::<3>(0).copy_from(&(a - bias.accel));
            ExtState { q: x.q * hat(&w), xi: am * x.xi + forcing, omega: am * x.omega }
        },
        &x0,
        Span::full(&grid),
        |i, x| {
            if i % REPROJECT_EVERY == 0 || keyframes.binary_search(&i).is_ok() {
                match project(&x.q) {
                    Ok(r) => x.q = r.into_inner(),
                    Err(e) => failure = Some(e),
                }
            }
        },
    )?;
    if let Some(e) = failure {
        return Err(e);
    }
    let mut q = Vec::with_capacity(states.len());
    let mut xi = Vec::with_capacity(states.len());
    let mut omega = Vec::with_capacity(states.len());
    for s in states {
        q.push(Rotation::from_matrix_unchecked(s.q));
        xi.push(s.xi);
        omega.push(s.omega);
    }
    Ok(ManifoldPeboExtension { grid, q, xi, omega, xi0: *xi0 })
}

/// The `(Q_c, theta)` that reproduce a known initial pose.
pub fn true_parameters(x0: &ExtendedPose, q0: &Rotation, g: &Vector3<f64>) -> (Rotation, Vector9) {
    let qc = Rotation::from_matrix_unchecked(x0.r.matrix() * q0.matrix().transpose());
    let rt = x0.r.matrix().transpose();
    let mut th = Vector9::zeros();
    th.fixed_rows_mut::<3>(0).copy_from(&(rt * x0.v));
    th.fixed_rows_mut::<3>(3).copy_from(&(-rt * x0.p));
    th.fixed_rows_mut::<3>(6).copy_from(&(qc.matrix().transpose() * g));
    (qc, th)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReconstructedPose {
    pub pose: ExtendedPose,
    /// Gravity in the `Q_c` frame implied by `theta`.
    pub g_c: Vector3<f64>,
}

/// Keyframe poses from `(Q_c, theta)`.
pub fn reconstruct_manifold_state(ext: &ManifoldPeboExtension, qc: &Rotation, theta: &Vector9) -> Vec<ReconstructedPose> {
    (0..ext.grid.keyframes().len())
        .map(|k| {
            let (s, sm) = ext.affine(k);
            let eta = s + sm * theta;
            let i = ext.grid.keyframes()[k];
            let r = (*qc * ext.q[i]).renormalized();
            let v = r.matrix() * eta.fixed_rows::<3>(0);
            let p = -(r.matrix() * eta.fixed_rows::<3>(3));
            ReconstructedPose { pose: ExtendedPose::new(r, v, p), g_c: eta.fixed_rows::<3>(6).into_owned() }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct PeboOptions {
    pub lm: LmOptions,
    pub gravity: Vector3<f64>,
    /// Keyframes whose landmark measurements enter the cost; defaults to the
    /// number of intervals, which leaves the final keyframe out.
    pub count: Option<usize>,
    /// Starting point `(Q_c, theta_vp, landmarks)`; computed when absent.
    pub initial: Option<(Rotation, SVector<f64, 6>, Vec<Vector3<f64>>)>,
}

impl Default for PeboOptions {
    fn default() -> Self {
        Self { lm: LmOptions::default(), gravity: super::gravity(), count: None, initial: None }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifoldEstimate {
    pub q_c: Rotation,
    pub theta: Vector9,
    pub landmarks: Vec<Vector3<f64>>,
    /// Reconstructed pose at every keyframe.
    pub poses: Vec<ExtendedPose>,
    pub cost: f64,
    /// Locally unobservable directions at the solution.
    pub nullspace: usize,
    pub report: LmReport,
}

#[derive(Debug, Clone)]
struct PeboParams {
    qc: Rotation,
    vp: SVector<f64, 6>,
    landmarks: Vec<Vector3<f64>>,
}

struct PeboProblem<'a> {
    q: Vec<Matrix3<f64>>,
    s: Vec<Vector3<f64>>,
    sm: Vec<SMatrix<f64, 3, 9>>,
    y: &'a [Vec<Vector3<f64>>],
    l: Matrix3<f64>,
    g: Vector3<f64>,
    known: Option<&'a [Vector3<f64>]>,
}

impl PeboProblem<'_> {
    fn m(&self) -> usize {
        self.y[0].len()
    }

    fn landmark<'b>(&'b self, x: &'b PeboParams, i: usize) -> &'b Vector3<f64> {
        match self.known {
            Some(p) => &p[i],
            None => &x.landmarks[i],
        }
    }

    fn theta(&self, x: &PeboParams) -> Vector9 {
        let mut th = Vector9::zeros();
        th.fixed_rows_mut::<6>(0).copy_from(&x.vp);
        th.fixed_rows_mut::<3>(6).copy_from(&(x.qc.matrix().transpose() * self.g));
        th
    }
}

impl LeastSquaresProblem for PeboProblem<'_> {
    type Params = PeboParams;

    fn tangent_dim(&self, _: &PeboParams) -> usize {
        9 + if self.known.is_some() { 0 } else { 3 * self.m() }
    }

    fn residual(&self, x: &PeboParams) -> DVector<f64> {
        let m = self.m();
        let th = self.theta(x);
        let qct = x.qc.matrix().transpose();
        let mut r = DVector::zeros(3 * m * self.q.len());
        for k in 0..self.q.len() {
            let pb = self.s[k] + self.sm[k] * th;
            for i in 0..m {
                let e = self.y[k][i] - self.q[k].transpose() * (qct * self.landmark(x, i)) - pb;
                r.fixed_rows_mut::<3>(3 * (k * m + i)).copy_from(&(self.l * e));
            }
        }
        r
    }

    fn jacobian(&self, x: &PeboParams) -> DMatrix<f64> {
        let m = self.m();
        let n = self.tangent_dim(x);
        let qct = x.qc.matrix().transpose();
        let mut j = DMatrix::zeros(3 * m * self.q.len(), n);
        let hg = hat(&(qct * self.g));
        for k in 0..self.q.len() {
            let sg = self.sm[k].fixed_columns::<3>(6).into_owned();
            let svp = self.sm[k].fixed_columns::<6>(0).into_owned();
            for i in 0..m {
                let row = 3 * (k * m + i);
                let p = self.landmark(x, i);
                let dq = -(self.q[k].transpose() * hat(&(qct * p)) + sg * hg);
                j.fixed_view_mut::<3, 3>(row, 0).copy_from(&(self.l * dq));
                j.fixed_view_mut::<3, 6>(row, 3).copy_from(&(-self.l * svp));
                if self.known.is_none() {
                    j.fixed_view_mut::<3, 3>(row, 9 + 3 * i).copy_from(&(-self.l * self.q[k].transpose() * qct));
                }
            }
        }
        j
    }

    fn retract(&self, x: &PeboParams, d: &DVector<f64>) -> PeboParams {
        let qc = (x.qc * exp(&Vector3::new(d[0], d[1], d[2]))).renormalized();
        let vp = x.vp + SVector::<f64, 6>::from_iterator(d.rows(3, 6).iter().copied());
        let landmarks = if self.known.is_some() {
            x.landmarks.clone()
        } else {
            x.landmarks
                .iter()
                .enumerate()
                .map(|(i, p)| p + Vector3::new(d[9 + 3 * i], d[10 + 3 * i], d[11 + 3 * i]))
                .collect()
        };
        PeboParams { qc, vp, landmarks }
    }
}

/// Rotation of least angle taking the direction of `from` to that of `to`.
fn align(from: &Vector3<f64>, to: &Vector3<f64>) -> Rotation {
    let a = from.normalize();
    let b = to.normalize();
    let axis = a.cross(&b);
    let s = axis.norm();
    let c = a.dot(&b);
    if s < 1e-12 {
        if c > 0.0 {
            return Rotation::identity();
        }
        // half turn about any axis orthogonal to a
        let mut perp = a.cross(&Vector3::x());
        if perp.norm() < 1e-6 {
            perp = a.cross(&Vector3::y());
        }
        return exp(&(perp.normalize() * std::f64::consts::PI));
    }
    exp(&(axis / s * s.atan2(c)))
}

fn initial_known(p: &PeboProblem<'_>, landmarks: &[Vector3<f64>]) -> Result<PeboParams> {
    let m = landmarks.len();
    let pbar = landmarks.iter().sum::<Vector3<f64>>() / m as f64;
    let mut h = Matrix3::zeros();
    for k in 0..p.q.len() {
        let ybar = p.y[k].iter().sum::<Vector3<f64>>() / m as f64;
        for i in 0..m {
            let a = p.q[k] * (p.y[k][i] - ybar);
            h += a * (landmarks[i] - pbar).transpose();
        }
    }
    let qc = procrustes(&h)?.transpose();
    let qct = qc.matrix().transpose();
    let gc = qct * p.g;
    let rows = 3 * m * p.q.len();
    let mut a = DMatrix::zeros(rows, 6);
    let mut b = DVector::zeros(rows);
    for k in 0..p.q.len() {
        let sg = p.sm[k].fixed_columns::<3>(6).into_owned();
        let svp = p.sm[k].fixed_columns::<6>(0).into_owned();
        for i in 0..m {
            let row = 3 * (k * m + i);
            let rhs = p.y[k][i] - p.q[k].transpose() * (qct * landmarks[i]) - p.s[k] - sg * gc;
            a.fixed_view_mut::<3, 6>(row, 0).copy_from(&(p.l * svp));
            b.fixed_rows_mut::<3>(row).copy_from(&(p.l * rhs));
        }
    }
    let sol = lstsq(&a, &b, RankPolicy::Strict)?;
    Ok(PeboParams { qc, vp: SVector::<f64, 6>::from_iterator(sol.x.iter().copied()), landmarks: Vec::new() })
}

fn initial_unknown(p: &PeboProblem<'_>) -> Result<PeboParams> {
    let m = p.m();
    let rows = 3 * m * p.q.len();
    let mut a = DMatrix::zeros(rows, 3 * m + 9);
    let mut b = DVector::zeros(rows);
    for k in 0..p.q.len() {
        for i in 0..m {
            let row = 3 * (k * m + i);
            a.fixed_view_mut::<3, 3>(row, 3 * i).copy_from(&(p.l * p.q[k].transpose()));
            a.fixed_view_mut::<3, 9>(row, 3 * m).copy_from(&(p.l * p.sm[k]));
            b.fixed_rows_mut::<3>(row).copy_from(&(p.l * (p.y[k][i] - p.s[k])));
        }
    }
    let sol = lstsq(&a, &b, RankPolicy::MinNorm)?;
    let gc = Vector3::new(sol.x[3 * m + 6], sol.x[3 * m + 7], sol.x[3 * m + 8]);
    if gc.norm() < 1e-9 {
        return Err(Error::RankDeficient { nullspace: sol.nullspace });
    }
    let qc = align(&gc, &p.g);
    let landmarks = (0..m)
        .map(|i| qc.matrix() * Vector3::new(sol.x[3 * i], sol.x[3 * i + 1], sol.x[3 * i + 2]))
        .collect();
    let vp = SVector::<f64, 6>::from_iterator(sol.x.rows(3 * m, 6).iter().copied());
    Ok(PeboParams { qc, vp, landmarks })
}

fn build_problem<'a>(
    ext: &ManifoldPeboExtension,
    obs: &'a LandmarkObservations,
    mode: &'a LandmarkMode,
    opts: &PeboOptions,
) -> Result<PeboProblem<'a>> {
    obs.validate()?;
    let count = opts.count.unwrap_or(ext.grid.n_intervals()).max(1);
    if count > obs.n_keyframes() || count > ext.grid.keyframes().len() {
        return Err(Error::Shape(format!("{count} keyframes requested, {} observed", obs.n_keyframes())));
    }
    if let LandmarkMode::Known(p) = mode {
        if p.len() != obs.n_landmarks() {
            return Err(Error::Shape("landmark count does not match the observations".into()));
        }
    }
    let mut q = Vec::with_capacity(count);
    let mut s = Vec::with_capacity(count);
    let mut sm = Vec::with_capacity(count);
    for k in 0..count {
        let (sk, smk) = ext.affine(k);
        q.push(*ext.q[ext.grid.keyframes()[k]].matrix());
        s.push(sk.fixed_rows::<3>(3).into_owned());
        sm.push(smk.fixed_rows::<3>(3).into_owned());
    }
    let known = match mode {
        LandmarkMode::Known(p) => Some(p.as_slice()),
        LandmarkMode::Unknown => None,
    };
    Ok(PeboProblem { q, s, sm, y: &obs.y[..count], l: obs.whitening()?, g: opts.gravity, known })
}

/// Jacobians of the landmark cost at `(Q_c, theta_vp, landmarks)`; the
/// landmarks are ignored in known mode.
pub fn pebo_jacobians(
    ext: &ManifoldPeboExtension,
    obs: &LandmarkObservations,
    mode: &LandmarkMode,
    opts: &PeboOptions,
    point: (Rotation, SVector<f64, 6>, Vec<Vector3<f64>>),
    h: f64,
) -> Result<JacobianPair> {
    let problem = build_problem(ext, obs, mode, opts)?;
    let landmarks = if problem.known.is_some() { Vec::new() } else { point.2 };
    if problem.known.is_none() && landmarks.len() != obs.n_landmarks() {
        return Err(Error::Shape("landmark point has the wrong length".into()));
    }
    Ok(JacobianPair::evaluate(&problem, &PeboParams { qc: point.0, vp: point.1, landmarks }, h))
}

/// Minimizes the whitened landmark residuals over `(Q_c, theta)` subject to
/// `g_c = Q_c^T g`, optionally with unknown landmarks.
pub fn solve_manifold_pebo(
    ext: &ManifoldPeboExtension,
    obs: &LandmarkObservations,
    mode: &LandmarkMode,
    opts: &PeboOptions,
) -> Result<ManifoldEstimate> {
    let problem = build_problem(ext, obs, mode, opts)?;
    let known = problem.known;
    let x0 = match (&opts.initial, known) {
        (Some((qc, vp, lm)), _) => PeboParams { qc: *qc, vp: *vp, landmarks: lm.clone() },
        (None, Some(p)) => initial_known(&problem, p)?,
        (None, None) => initial_unknown(&problem)?,
    };
    if known.is_none() && x0.landmarks.len() != obs.n_landmarks() {
        return Err(Error::Shape("initial landmark guess has the wrong length".into()));
    }
    let (x, report) = levenberg_marquardt(&problem, &x0, &opts.lm)?;
    let nullspace = nullspace_dim(&problem.jacobian(&x), 1e-9);
    if known.is_some() && nullspace > 0 {
        return Err(Error::RankDeficient { nullspace });
    }
    let theta = problem.theta(&x);
    let poses = reconstruct_manifold_state(ext, &x.qc, &theta).into_iter().map(|r| r.pose).collect();
    let landmarks = match known {
        Some(p) => p.to_vec(),
        None => x.landmarks.clone(),
    };
    Ok(ManifoldEstimate { q_c: x.qc, theta, landmarks, poses, cost: report.cost, nullspace, report })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::manifold::imu::{preintegrate_keyframes, propagate_keyframe, PreintMethod};
    use crate::manifold::kinematics::{simulate_rigid_body, RigidBodySpec};
    use crate::manifold::landmarks::{default_landmarks, sample_landmark_observations};
    use crate::manifold::lm::numeric_jacobian;
    use crate::manifold::{gravity, max_pose_error};

    fn scenario() -> (crate::manifold::RigidBodyTruth, ManifoldPeboExtension) {
        let grid = TimeGrid::uniform(0.0, 0.01, 1000, 100).unwrap();
        let mut spec = RigidBodySpec::circle(2.0, 0.6);
        spec.initial.r = exp(&Vector3::new(0.1, -0.2, 0.3));
        spec.initial.p = Vector3::new(1.0, -1.0, 0.5);
        let truth = simulate_rigid_body(&spec, &grid).unwrap();
        let ext = run_manifold_extension(&truth.imu, &ImuBias::default(), &Rotation::identity(), &Vector9::zeros()).unwrap();
        (truth, ext)
    }

    #[test]
    fn true_parameters_reconstruct_truth() {
        let (truth, ext) = scenario();
        let (qc, th) = true_parameters(&truth.poses[0], &Rotation::identity(), &gravity());
        let rec: Vec<_> = reconstruct_manifold_state(&ext, &qc, &th).into_iter().map(|r| r.pose).collect();
        let e = max_pose_error(&rec, &truth.keyframe_poses());
        assert!(e.rotation < 1e-9 && e.velocity < 1e-7 && e.position < 1e-7, "{e:?}");
    }

    #[test]
    fn any_consistent_parameters_follow_the_kinematics() {
        let (truth, ext) = scenario();
        let pre = preintegrate_keyframes(&truth.imu, &ImuBias::default(), PreintMethod::ExactSubstep).unwrap();
        let qc = exp(&Vector3::new(-0.4, 0.7, 1.1));
        let mut th = Vector9::from_iterator((0..9).map(|i| (i as f64 * 0.37).sin()));
        th.fixed_rows_mut::<3>(6).copy_from(&(qc.matrix().transpose() * gravity()));
        let rec: Vec<_> = reconstruct_manifold_state(&ext, &qc, &th).into_iter().map(|r| r.pose).collect();
        for (k, s) in pre.iter().enumerate() {
            let next = propagate_keyframe(&rec[k], s, &gravity());
            let d = next.distance(&rec[k + 1]);
            assert!(d.rotation < 1e-6 && d.velocity < 1e-6 && d.position < 1e-6, "{k}: {d:?}");
        }
    }

    #[test]
    fn known_landmarks_noise_free() {
        let (truth, ext) = scenario();
        let lms = default_landmarks();
        let clean = sample_landmark_observations(&truth.keyframe_poses(), &lms, &Matrix3::zeros(), 3).unwrap();
        let clean = LandmarkObservations { sigma: Matrix3::identity() * 1e-4, ..clean };
        let est = solve_manifold_pebo(&ext, &clean, &LandmarkMode::Known(lms), &PeboOptions::default()).unwrap();
        let e = max_pose_error(&est.poses, &truth.keyframe_poses());
        assert!(e.rotation < 1e-6 && e.position < 1e-5 && e.velocity < 1e-5, "{e:?}");
        assert_eq!(est.nullspace, 0);
    }

    #[test]
    fn unknown_landmarks_report_gauge() {
        let (truth, ext) = scenario();
        let lms = default_landmarks();
        let obs = sample_landmark_observations(&truth.keyframe_poses(), &lms, &(Matrix3::identity() * 1e-6), 5).unwrap();
        let est = solve_manifold_pebo(&ext, &obs, &LandmarkMode::Unknown, &PeboOptions::default()).unwrap();
        assert_eq!(est.nullspace, 4);
        // gauge-invariant quantities: landmark distances and speed
        let d_true = (lms[0] - lms[1]).norm();
        let d_est = (est.landmarks[0] - est.landmarks[1]).norm();
        assert!((d_true - d_est).abs() < 1e-2, "{d_true} {d_est}");
    }

    #[test]
    fn analytic_jacobian_matches_finite_differences() {
        let (truth, ext) = scenario();
        let lms = default_landmarks();
        let obs = sample_landmark_observations(&truth.keyframe_poses(), &lms, &(Matrix3::identity() * 1e-2), 9).unwrap();
        for known in [true, false] {
            let problem = PeboProblem {
                q: (0..3).map(|k| *ext.q[ext.grid.keyframes()[k]].matrix()).collect(),
                s: (0..3).map(|k| ext.affine(k).0.fixed_rows::<3>(3).into_owned()).collect(),
                sm: (0..3).map(|k| ext.affine(k).1.fixed_rows::<3>(3).into_owned()).collect(),
                y: &obs.y[..3],
                l: obs.whitening().unwrap(),
                g: gravity(),
                known: if known { Some(lms.as_slice()) } else { None },
            };
            let x = PeboParams {
                qc: exp(&Vector3::new(0.3, 0.1, -0.5)),
                vp: SVector::<f64, 6>::from_iterator((0..6).map(|i| i as f64 - 2.5)),
                landmarks: lms.iter().map(|p| p * 1.1).collect(),
            };
            let d = numeric_jacobian(&problem, &x, 1e-6) - problem.jacobian(&x);
            assert!(d.amax() < 1e-4, "known={known}: {}", d.amax());
        }
    }
}
