//! Fixed-step classical Runge–Kutta integration on the fine grid.
//!
//! Right-hand sides receive a [`Stage`] describing where in the step they are
//! evaluated, so sampled signals can be looked up without interpolation: a
//! zero-order-hold input uses `stage.step`, a half-step sampled signal uses
//! [`Stage::half_index`].

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::grid::TimeGrid;

/// Evaluation point of a right-hand side inside one integration step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stage {
    pub t: f64,
    /// Index of the fine step being taken (from grid point `step` to `step + 1`).
    pub step: usize,
    /// 0 at the start of the step, 1 at the midpoint, 2 at the end.
    pub node: usize,
}

impl Stage {
    /// Index on the half-step grid `t0 + j * dt / 2`.
    pub fn half_index(&self) -> usize {
        2 * self.step + self.node
    }
}

/// A contiguous range of grid points `start..=end`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Span {
    pub t0: f64,
    pub dt: f64,
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub fn new(grid: &TimeGrid, start: usize, end: usize) -> Result<Self> {
        if start > end || end > grid.n_steps() {
            return Err(Error::InvalidGrid(format!(
                "span [{start}, {end}] is not inside the grid of {} steps",
                grid.n_steps()
            )));
        }
        Ok(Self { t0: grid.t0(), dt: grid.dt(), start, end })
    }

    pub fn full(grid: &TimeGrid) -> Self {
        Self { t0: grid.t0(), dt: grid.dt(), start: 0, end: grid.n_steps() }
    }

    pub fn time(&self, i: usize) -> f64 {
        self.t0 + i as f64 * self.dt
    }

    pub fn len(&self) -> usize {
        self.end - self.start + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// States that can be advanced by a Runge–Kutta step.
pub trait OdeState: Clone {
    /// `self + s * other`.
    fn add_scaled(&self, other: &Self, s: f64) -> Self;
    fn is_finite(&self) -> bool;
}

impl OdeState for DMatrix<f64> {
    fn add_scaled(&self, other: &Self, s: f64) -> Self {
        self + other * s
    }

    fn is_finite(&self) -> bool {
        self.iter().all(|v| v.is_finite())
    }
}

impl OdeState for DVector<f64> {
    fn add_scaled(&self, other: &Self, s: f64) -> Self {
        self + other * s
    }

    fn is_finite(&self) -> bool {
        self.iter().all(|v| v.is_finite())
    }
}

/// One classical RK4 step from grid point `step`.
pub fn rk4_step<S, F>(rhs: &mut F, x: &S, t: f64, dt: f64, step: usize) -> S
where
    S: OdeState,
    F: FnMut(Stage, &S) -> S,
{
    let h = 0.5 * dt;
    let k1 = rhs(Stage { t, step, node: 0 }, x);
    let k2 = rhs(Stage { t: t + h, step, node: 1 }, &x.add_scaled(&k1, h));
    let k3 = rhs(Stage { t: t + h, step, node: 1 }, &x.add_scaled(&k2, h));
    let k4 = rhs(Stage { t: t + dt, step, node: 2 }, &x.add_scaled(&k3, dt));
    let incr = k1.add_scaled(&k2, 2.0).add_scaled(&k3, 2.0).add_scaled(&k4, 1.0);
    x.add_scaled(&incr, dt / 6.0)
}

/// Integrates over `span`, calling `post(grid_index, &mut state)` after each
/// step. Returns the state at every grid point of the span.
pub fn integrate_with<S, F, P>(mut rhs: F, x0: &S, span: Span, mut post: P) -> Result<Vec<S>>
where
    S: OdeState,
    F: FnMut(Stage, &S) -> S,
    P: FnMut(usize, &mut S),
{
    let mut out = Vec::with_capacity(span.len());
    out.push(x0.clone());
    let mut x = x0.clone();
    for step in span.start..span.end {
        let mut next = rk4_step(&mut rhs, &x, span.time(step), span.dt, step);
        post(step + 1, &mut next);
        if !next.is_finite() {
            return Err(Error::IntegrationDiverged { step, t: span.time(step) });
        }
        out.push(next.clone());
        x = next;
    }
    Ok(out)
}

/// Integrates `dX/dt = rhs(stage, X)` from `x0` over `span`.
pub fn integrate_matrix_ode<F>(rhs: F, x0: &DMatrix<f64>, span: Span) -> Result<Vec<DMatrix<f64>>>
where
    F: FnMut(Stage, &DMatrix<f64>) -> DMatrix<f64>,
{
    integrate_with(rhs, x0, span, |_, _| {})
}

/// Like [`integrate_with`] but only keeps the final state.
pub fn integrate_final<S, F, P>(mut rhs: F, x0: &S, span: Span, mut post: P) -> Result<S>
where
    S: OdeState,
    F: FnMut(Stage, &S) -> S,
    P: FnMut(usize, &mut S),
{
    let mut x = x0.clone();
    for step in span.start..span.end {
        let mut next = rk4_step(&mut rhs, &x, span.time(step), span.dt, step);
        post(step + 1, &mut next);
        if !next.is_finite() {
            return Err(Error::IntegrationDiverged { step, t: span.time(step) });
        }
        x = next;
    }
    Ok(x)
}
