//! Euclidean preintegration: per-interval transitions `(F_k, v_k)` and the
//! batch estimation problems built on them.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::integrate::{integrate_with, Span};
use crate::linalg::{lstsq, RankPolicy};
use crate::ltv::{LtvModel, MeasurementSet, SignalTrajectory};

/// `x(t_{k+1}) = F_k x(t_k) + v_k` over one keyframe interval.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreintegralSegment {
    pub k: usize,
    pub f: DMatrix<f64>,
    pub v: DVector<f64>,
    pub t_start: f64,
    pub t_end: f64,
    pub start: usize,
    pub end: usize,
}

impl PreintegralSegment {
    /// `F x + v`.
    pub fn apply(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.f * x + &self.v
    }
}

/// `F(t)` and `v(t)` at every grid point of one interval, starting from the
/// reset values `F = I`, `v = 0`.
pub fn preintegrate_trajectory(
    model: &LtvModel,
    u: &SignalTrajectory,
    start: usize,
    end: usize,
) -> Result<Vec<(DMatrix<f64>, DVector<f64>)>> {
    let n = model.n;
    let span = Span::new(&u.grid, start, end)?;
    let mut x0 = DMatrix::<f64>::zeros(n, n + 1);
    x0.view_mut((0, 0), (n, n)).fill_with_identity();
    // [F | v]' = A [F | v] + [0 | B u]
    let traj = integrate_with(
        |s, x: &DMatrix<f64>| {
            let mut dx = model.a(s.t) * x;
            let bu = model.b(s.t) * &u.values[s.step];
            let mut col = dx.column_mut(n);
            col += bu;
            dx
        },
        &x0,
        span,
        |_, _| {},
    )?;
    Ok(traj
        .into_iter()
        .map(|x| (x.view((0, 0), (n, n)).into_owned(), x.column(n).into_owned()))
        .collect())
}

/// Preintegrals over `[t_start, t_end]` given as grid indices.
pub fn preintegrate_segment(
    model: &LtvModel,
    u: &SignalTrajectory,
    k: usize,
    start: usize,
    end: usize,
) -> Result<PreintegralSegment> {
    let traj = preintegrate_trajectory(model, u, start, end)?;
    let (f, v) = traj.into_iter().last().expect("span has at least one point");
    Ok(PreintegralSegment { k, f, v, t_start: u.grid.time(start), t_end: u.grid.time(end), start, end })
}

/// One segment per keyframe interval of the input's grid.
pub fn preintegrate_all(model: &LtvModel, u: &SignalTrajectory) -> Result<Vec<PreintegralSegment>> {
    u.grid
        .intervals()
        .enumerate()
        .map(|(k, (a, b))| preintegrate_segment(model, u, k, a, b))
        .collect()
}

/// Keyframe states of a batch solve, with process residuals `w_k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchEstimate {
    pub times: Vec<f64>,
    pub states: Vec<DVector<f64>>,
    pub residuals: Vec<DVector<f64>>,
    pub cost: f64,
    pub nullspace: usize,
}

/// `gamma_k = lambda^(N - k)` for `k = 0..N-1`.
pub fn forgetting_weights(n: usize, lambda: f64) -> Vec<f64> {
    (0..n).map(|k| lambda.powi((n - k) as i32)).collect()
}

fn check_inputs(
    segments: &[PreintegralSegment],
    meas: &MeasurementSet,
    model: &LtvModel,
    gamma: &[f64],
) -> Result<()> {
    let n_seg = segments.len();
    if n_seg == 0 {
        return Err(Error::InvalidInput("at least one segment is required".into()));
    }
    if gamma.len() != n_seg {
        return Err(Error::Shape(format!("{} output weights for {} intervals", gamma.len(), n_seg)));
    }
    if gamma.iter().any(|&g| !(g > 0.0) || !g.is_finite()) {
        return Err(Error::InvalidInput("weights must be positive".into()));
    }
    let kf = meas.grid.keyframes();
    if kf.len() < n_seg {
        return Err(Error::Shape("fewer keyframe measurements than intervals".into()));
    }
    for (k, s) in segments.iter().enumerate() {
        if s.start != kf[k] || s.end != kf[k + 1] {
            return Err(Error::InvalidInput(format!("segment {k} does not span keyframes {k}..{}", k + 1)));
        }
        if s.f.shape() != (model.n, model.n) {
            return Err(Error::Shape(format!("segment {k} has the wrong state dimension")));
        }
    }
    Ok(())
}

/// `ybar(t_k) - D(t_k) ubar(t_k)` and `C(t_k)` for `k = 0..N-1`.
fn output_terms(meas: &MeasurementSet, model: &LtvModel, count: usize) -> Vec<(DVector<f64>, DMatrix<f64>)> {
    let kf = meas.grid.keyframes();
    (0..count)
        .map(|k| {
            let t = meas.grid.time(kf[k]);
            let rhs = &meas.y[k] - model.d(t) * &meas.u.values[kf[k]];
            (rhs, model.c(t))
        })
        .collect()
}

/// Minimizes `sum gamma_k |ybar_k - C x_k - D ubar_k|^2 + sum gamma'_k |w_k|^2`
/// with `w_k = x_{k+1} - F_k x_k - vbar_k`, as one stacked least-squares
/// problem over all keyframe states.
pub fn solve_batch(
    segments: &[PreintegralSegment],
    meas: &MeasurementSet,
    model: &LtvModel,
    gamma: &[f64],
    gamma_prime: &[f64],
    policy: RankPolicy,
) -> Result<BatchEstimate> {
    check_inputs(segments, meas, model, gamma)?;
    if gamma_prime.len() != segments.len() || gamma_prime.iter().any(|&g| !(g > 0.0) || !g.is_finite()) {
        return Err(Error::InvalidInput("process weights must be positive, one per interval".into()));
    }
    let n = model.n;
    let p = model.p;
    let big_n = segments.len();
    let rows = big_n * (p + n);
    let cols = (big_n + 1) * n;
    let mut a = DMatrix::<f64>::zeros(rows, cols);
    let mut b = DVector::<f64>::zeros(rows);
    let terms = output_terms(meas, model, big_n);
    for (k, (rhs, c)) in terms.iter().enumerate() {
        let s = gamma[k].sqrt();
        a.view_mut((k * p, k * n), (p, n)).copy_from(&(c * s));
        b.rows_mut(k * p, p).copy_from(&(rhs * s));
    }
    let off = big_n * p;
    for (k, seg) in segments.iter().enumerate() {
        let s = gamma_prime[k].sqrt();
        let r = off + k * n;
        a.view_mut((r, k * n), (n, n)).copy_from(&(-&seg.f * s));
        a.view_mut((r, (k + 1) * n), (n, n)).copy_from(&(DMatrix::<f64>::identity(n, n) * s));
        b.rows_mut(r, n).copy_from(&(&seg.v * s));
    }
    let sol = lstsq(&a, &b, policy)?;
    let states: Vec<DVector<f64>> = (0..=big_n).map(|k| sol.x.rows(k * n, n).into_owned()).collect();
    let residuals: Vec<DVector<f64>> = segments
        .iter()
        .enumerate()
        .map(|(k, seg)| &states[k + 1] - seg.apply(&states[k]))
        .collect();
    let cost = batch_cost(&terms, &states, &residuals, gamma, Some(gamma_prime));
    Ok(BatchEstimate { times: keyframe_times(segments), states, residuals, cost, nullspace: sol.nullspace })
}

/// Hard-constrained variant: `w_k = 0`, so every state is an affine
/// function of `x(t_0)` and only `n` unknowns remain.
pub fn solve_batch_hard(
    segments: &[PreintegralSegment],
    meas: &MeasurementSet,
    model: &LtvModel,
    gamma: &[f64],
    policy: RankPolicy,
) -> Result<BatchEstimate> {
    check_inputs(segments, meas, model, gamma)?;
    let n = model.n;
    let p = model.p;
    let big_n = segments.len();
    // x_k = Phi_k x_0 + c_k
    let mut phis = Vec::with_capacity(big_n + 1);
    let mut offsets = Vec::with_capacity(big_n + 1);
    phis.push(DMatrix::<f64>::identity(n, n));
    offsets.push(DVector::<f64>::zeros(n));
    for seg in segments {
        let phi = &seg.f * phis.last().unwrap();
        let c = seg.apply(offsets.last().unwrap());
        phis.push(phi);
        offsets.push(c);
    }
    let terms = output_terms(meas, model, big_n);
    let mut a = DMatrix::<f64>::zeros(big_n * p, n);
    let mut b = DVector::<f64>::zeros(big_n * p);
    for (k, (rhs, c)) in terms.iter().enumerate() {
        let s = gamma[k].sqrt();
        a.view_mut((k * p, 0), (p, n)).copy_from(&(c * &phis[k] * s));
        b.rows_mut(k * p, p).copy_from(&((rhs - c * &offsets[k]) * s));
    }
    let sol = lstsq(&a, &b, policy)?;
    let states: Vec<DVector<f64>> = phis.iter().zip(&offsets).map(|(phi, c)| phi * &sol.x + c).collect();
    let residuals = vec![DVector::zeros(n); big_n];
    let cost = batch_cost(&terms, &states, &residuals, gamma, None);
    Ok(BatchEstimate { times: keyframe_times(segments), states, residuals, cost, nullspace: sol.nullspace })
}

fn keyframe_times(segments: &[PreintegralSegment]) -> Vec<f64> {
    let mut t: Vec<f64> = segments.iter().map(|s| s.t_start).collect();
    t.push(segments.last().map(|s| s.t_end).unwrap_or(0.0));
    t
}

fn batch_cost(
    terms: &[(DVector<f64>, DMatrix<f64>)],
    states: &[DVector<f64>],
    residuals: &[DVector<f64>],
    gamma: &[f64],
    gamma_prime: Option<&[f64]>,
) -> f64 {
    let jx: f64 = terms
        .iter()
        .enumerate()
        .map(|(k, (rhs, c))| gamma[k] * (rhs - c * &states[k]).norm_squared())
        .sum();
    let jw: f64 = match gamma_prime {
        Some(gp) => residuals.iter().zip(gp).map(|(w, g)| g * w.norm_squared()).sum(),
        None => 0.0,
    };
    jx + jw
}
