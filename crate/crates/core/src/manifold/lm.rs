//! Levenberg–Marquardt over a retraction.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A nonlinear least-squares problem `min |r(x)|^2` with tangent-space steps.
pub trait LeastSquaresProblem {
    type Params: Clone;

    fn tangent_dim(&self, x: &Self::Params) -> usize;
    fn residual(&self, x: &Self::Params) -> DVector<f64>;
    /// Derivative of the residual with respect to the tangent step at `x`.
    fn jacobian(&self, x: &Self::Params) -> DMatrix<f64>;
    fn retract(&self, x: &Self::Params, delta: &DVector<f64>) -> Self::Params;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LmOptions {
    pub max_iterations: usize,
    pub lambda_init: f64,
    pub lambda_up: f64,
    pub lambda_down: f64,
    /// Stop once an accepted step lowers the cost by less than this fraction.
    pub rel_tol: f64,
    pub max_consecutive_rejects: usize,
}

impl Default for LmOptions {
    fn default() -> Self {
        Self {
            max_iterations: 100,
            lambda_init: 1e-4,
            lambda_up: 10.0,
            lambda_down: 0.3,
            rel_tol: 1e-10,
            max_consecutive_rejects: 5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterationLog {
    pub iteration: usize,
    pub cost: f64,
    pub lambda: f64,
    pub accepted: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LmReport {
    pub initial_cost: f64,
    pub cost: f64,
    pub iterations: usize,
    pub converged: bool,
    pub log: Vec<IterationLog>,
}

fn cost(r: &DVector<f64>) -> f64 {
    r.norm_squared()
}

/// True when a lightly damped Gauss–Newton step promises less than a
/// `1e-4` fraction of the current cost, i.e. rejections are rounding noise.
fn stationary(j: &DMatrix<f64>, r: &DVector<f64>, lambda: f64) -> bool {
    let g = j.transpose() * r;
    let jtj = j.transpose() * j;
    let n = jtj.nrows();
    let scale = jtj.diagonal().max().max(1e-300);
    let Some(ch) = (&jtj + DMatrix::identity(n, n) * (lambda * scale)).cholesky() else {
        return false;
    };
    let d = -ch.solve(&g);
    let predicted = -(g.dot(&d) + 0.5 * (j * &d).norm_squared());
    predicted <= 1e-4 * cost(r)
}

pub fn levenberg_marquardt<P: LeastSquaresProblem>(
    problem: &P,
    x0: &P::Params,
    opts: &LmOptions,
) -> Result<(P::Params, LmReport)> {
    let mut x = x0.clone();
    let mut r = problem.residual(&x);
    let mut c = cost(&r);
    if !c.is_finite() {
        return Err(Error::NoConvergence { iterations: 0, cost: c });
    }
    let initial_cost = c;
    let mut lambda = opts.lambda_init;
    let mut log = Vec::new();
    let mut rejects = 0;
    let mut converged = c == 0.0;
    let mut it = 0;
    while it < opts.max_iterations && !converged {
        it += 1;
        let j = problem.jacobian(&x);
        let jtj = j.transpose() * &j;
        let g = j.transpose() * &r;
        let n = jtj.nrows();
        let scale = jtj.diagonal().max().max(1e-300);
        let damped = &jtj + DMatrix::identity(n, n) * (lambda * scale);
        let step = damped.cholesky().map(|ch| -ch.solve(&g));
        let accepted = match step {
            Some(delta) if delta.iter().all(|v| v.is_finite()) => {
                let xn = problem.retract(&x, &delta);
                let rn = problem.residual(&xn);
                let cn = cost(&rn);
                if cn.is_finite() && cn < c {
                    let rel = (c - cn) / c;
                    x = xn;
                    r = rn;
                    c = cn;
                    lambda *= opts.lambda_down;
                    rejects = 0;
                    if rel < opts.rel_tol || c == 0.0 || delta.norm() < 1e-15 {
                        converged = true;
                    }
                    true
                } else {
                    false
                }
            }
            _ => false,
        };
        if !accepted {
            lambda *= opts.lambda_up;
            rejects += 1;
            if rejects >= opts.max_consecutive_rejects {
                if stationary(&j, &r, opts.lambda_init) {
                    converged = true;
                } else {
                    log.push(IterationLog { iteration: it, cost: c, lambda, accepted });
                    return Err(Error::NoConvergence { iterations: it, cost: c });
                }
            }
        }
        log.push(IterationLog { iteration: it, cost: c, lambda, accepted });
    }
    Ok((x, LmReport { initial_cost, cost: c, iterations: it, converged, log }))
}

/// Central-difference Jacobian through the retraction.
pub fn numeric_jacobian<P: LeastSquaresProblem>(problem: &P, x: &P::Params, h: f64) -> DMatrix<f64> {
    let n = problem.tangent_dim(x);
    let m = problem.residual(x).len();
    let mut out = DMatrix::zeros(m, n);
    for j in 0..n {
        let mut d = DVector::zeros(n);
        d[j] = h;
        let rp = problem.residual(&problem.retract(x, &d));
        d[j] = -h;
        let rm = problem.residual(&problem.retract(x, &d));
        out.set_column(j, &((rp - rm) / (2.0 * h)));
    }
    out
}

/// Analytic and central-difference Jacobians at one evaluation point.
#[derive(Debug, Clone, PartialEq)]
pub struct JacobianPair {
    pub analytic: DMatrix<f64>,
    pub numeric: DMatrix<f64>,
}

impl JacobianPair {
    pub fn evaluate<P: LeastSquaresProblem>(problem: &P, x: &P::Params, h: f64) -> Self {
        Self { analytic: problem.jacobian(x), numeric: numeric_jacobian(problem, x, h) }
    }

    /// `|J_analytic - J_numeric|_F / |J_analytic|_F`.
    pub fn rel_error(&self) -> f64 {
        (&self.analytic - &self.numeric).norm() / self.analytic.norm().max(1e-300)
    }
}

/// Number of tangent directions the residual is locally blind to.
pub fn nullspace_dim(j: &DMatrix<f64>, tol: f64) -> usize {
    if j.ncols() == 0 {
        return 0;
    }
    let sv = j.clone().svd(false, false).singular_values;
    let max = sv.max();
    let rank = sv.iter().filter(|&&s| s > tol * max.max(1e-300)).count();
    j.ncols() - rank
}
