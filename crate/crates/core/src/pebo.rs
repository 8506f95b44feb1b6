//! Parameter-estimation-based observer for LTV systems.
//!
//! The dynamic extension `xi' = A xi + B ubar`, `Omega' = A Omega` turns state
//! estimation into identifying the constant `theta = x(t_0)` from the linear
//! regression `Ybar(t_k) = C(t_k) Omega(t_k) theta`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::TimeGrid;
use crate::integrate::{integrate_with, Span};
use crate::linalg::{check_psd, lstsq, rcond, symmetrize, whitening, RankPolicy};
use crate::ltv::{LtvModel, MeasurementSet, SignalTrajectory};

/// Keyframes whose fundamental matrix has a reciprocal condition number
/// below this are flagged.
pub const RCOND_WARN: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct PeboExtension {
    pub grid: TimeGrid,
    pub xi0: DVector<f64>,
    /// `xi` at every grid point.
    pub xi: Vec<DVector<f64>>,
    /// `Omega` at every grid point; `Omega(t_0) = I`.
    pub omega: Vec<DMatrix<f64>>,
    /// Reciprocal condition number of `Omega(t_k)` per keyframe.
    pub keyframe_rcond: Vec<f64>,
}

impl PeboExtension {
    pub fn ill_conditioned_keyframes(&self) -> Vec<usize> {
        self.keyframe_rcond
            .iter()
            .enumerate()
            .filter(|(_, &r)| r < RCOND_WARN)
            .map(|(k, _)| k)
            .collect()
    }

    /// `Phi(t, s) = Omega(t) Omega(s)^{-1}` between grid points.
    pub fn transition(&self, to: usize, from: usize) -> Result<DMatrix<f64>> {
        let inv = self.omega[from]
            .clone()
            .try_inverse()
            .ok_or_else(|| Error::InvalidInput(format!("Omega at grid point {from} is singular")))?;
        Ok(&self.omega[to] * inv)
    }
}

/// Integrates the dynamic extension over the whole horizon, without resets.
pub fn run_extension(model: &LtvModel, u: &SignalTrajectory, xi0: &DVector<f64>) -> Result<PeboExtension> {
    let n = model.n;
    if xi0.len() != n {
        return Err(Error::Shape(format!("xi0 has length {}, model has n = {n}", xi0.len())));
    }
    let mut x0 = DMatrix::<f64>::zeros(n, n + 1);
    x0.view_mut((0, 0), (n, n)).fill_with_identity();
    x0.column_mut(n).copy_from(xi0);
    let traj = integrate_with(
        |s, x: &DMatrix<f64>| {
            let mut dx = model.a(s.t) * x;
            let bu = model.b(s.t) * &u.values[s.step];
            let mut col = dx.column_mut(n);
            col += bu;
            dx
        },
        &x0,
        Span::full(&u.grid),
        |_, _| {},
    )?;
    let (omega, xi): (Vec<_>, Vec<_>) = traj
        .into_iter()
        .map(|x| (x.view((0, 0), (n, n)).into_owned(), x.column(n).into_owned()))
        .unzip();
    let keyframe_rcond = u.grid.keyframes().iter().map(|&i| rcond(&omega[i])).collect();
    Ok(PeboExtension { grid: u.grid.clone(), xi0: xi0.clone(), xi, omega, keyframe_rcond })
}

/// Regression data at each keyframe: `Ybar(t_k)` and `G(t_k) = C(t_k) Omega(t_k)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Regressor {
    pub times: Vec<f64>,
    pub ybar: Vec<DVector<f64>>,
    pub g: Vec<DMatrix<f64>>,
}

impl Regressor {
    pub fn len(&self) -> usize {
        self.ybar.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ybar.is_empty()
    }
}

/// `Ybar = ybar - C xi + C Omega xi0 - D ubar` at every keyframe.
pub fn build_regressor(meas: &MeasurementSet, ext: &PeboExtension, model: &LtvModel) -> Result<Regressor> {
    if meas.grid.dt() != ext.grid.dt() || meas.grid.n_steps() != ext.grid.n_steps() {
        return Err(Error::Shape("measurements and extension use different grids".into()));
    }
    let mut out = Regressor { times: vec![], ybar: vec![], g: vec![] };
    for (k, &i) in meas.grid.keyframes().iter().enumerate() {
        let t = meas.grid.time(i);
        let c = model.c(t);
        let g = &c * &ext.omega[i];
        let ybar = &meas.y[k] - &c * &ext.xi[i] + &g * &ext.xi0 - model.d(t) * &meas.u.values[i];
        out.times.push(t);
        out.ybar.push(ybar);
        out.g.push(g);
    }
    Ok(out)
}

/// `argmin sum_k |L_k (Ybar_k - G_k theta)|^2` over the first
/// `whiteners.len()` keyframes.
fn solve_whitened(reg: &Regressor, whiteners: &[DMatrix<f64>]) -> Result<DVector<f64>> {
    if whiteners.len() > reg.len() {
        return Err(Error::Shape(format!("{} weights for {} keyframes", whiteners.len(), reg.len())));
    }
    let n = reg.g.first().map(|g| g.ncols()).ok_or(Error::RankDeficient { nullspace: 0 })?;
    let rows: usize = whiteners.iter().map(|l| l.nrows()).sum();
    let mut a = DMatrix::<f64>::zeros(rows, n);
    let mut b = DVector::<f64>::zeros(rows);
    let mut r = 0;
    for (k, l) in whiteners.iter().enumerate() {
        let p = l.nrows();
        a.view_mut((r, 0), (p, n)).copy_from(&(l * &reg.g[k]));
        b.rows_mut(r, p).copy_from(&(l * &reg.ybar[k]));
        r += p;
    }
    Ok(lstsq(&a, &b, RankPolicy::Strict)?.x)
}

/// Weighted least squares `argmin sum_k gamma_k |Ybar_k - G_k theta|^2`
/// using the first `gamma.len()` keyframes.
pub fn estimate_theta(reg: &Regressor, gamma: &[f64]) -> Result<DVector<f64>> {
    if gamma.iter().any(|&g| !(g > 0.0) || !g.is_finite()) {
        return Err(Error::InvalidInput("weights must be positive".into()));
    }
    let whiteners: Vec<DMatrix<f64>> = gamma
        .iter()
        .enumerate()
        .map(|(k, g)| DMatrix::<f64>::identity(reg.ybar.get(k).map_or(0, |y| y.len()), reg.ybar.get(k).map_or(0, |y| y.len())) * g.sqrt())
        .collect();
    solve_whitened(reg, &whiteners)
}

/// `x_t = xi_t - Omega_t xi0 + Omega_t theta` at every keyframe.
pub fn reconstruct_state(ext: &PeboExtension, theta: &DVector<f64>) -> Vec<DVector<f64>> {
    ext.grid.keyframes().iter().map(|&i| reconstruct_at(ext, theta, i)).collect()
}

/// Same as [`reconstruct_state`] at every fine grid point.
pub fn reconstruct_fine(ext: &PeboExtension, theta: &DVector<f64>) -> Vec<DVector<f64>> {
    (0..ext.grid.len()).map(|i| reconstruct_at(ext, theta, i)).collect()
}

fn reconstruct_at(ext: &PeboExtension, theta: &DVector<f64>, i: usize) -> DVector<f64> {
    &ext.xi[i] + &ext.omega[i] * (theta - &ext.xi0)
}

/// Covariance of `x - xi` driven by input noise.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseBudget {
    pub grid: TimeGrid,
    /// `Pi` at every grid point, `Pi(t_0) = 0`.
    pub pi: Vec<DMatrix<f64>>,
    pub sigma_y: DMatrix<f64>,
}

impl NoiseBudget {
    pub fn at_keyframes(&self) -> Vec<DMatrix<f64>> {
        self.grid.keyframes().iter().map(|&i| self.pi[i].clone()).collect()
    }

    pub fn last(&self) -> &DMatrix<f64> {
        self.pi.last().expect("grid has at least one point")
    }
}

/// `Pi' = A Pi + Pi A^T + B Sigma_u B^T`, `Pi(t_0) = 0`, symmetrized after
/// every step.
pub fn propagate_noise(
    model: &LtvModel,
    grid: &TimeGrid,
    sigma_u: &DMatrix<f64>,
    sigma_y: &DMatrix<f64>,
) -> Result<NoiseBudget> {
    check_psd(sigma_u, "Sigma_u")?;
    check_psd(sigma_y, "Sigma_y")?;
    let n = model.n;
    let pi = integrate_with(
        |s, p: &DMatrix<f64>| {
            let a = model.a(s.t);
            let b = model.b(s.t);
            &a * p + p * a.transpose() + &b * sigma_u * b.transpose()
        },
        &DMatrix::zeros(n, n),
        Span::full(grid),
        |_, p| *p = symmetrize(p),
    )?;
    Ok(NoiseBudget { grid: grid.clone(), pi, sigma_y: sigma_y.clone() })
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightedEstimate {
    pub theta: DVector<f64>,
    /// Keyframes whose weight base `Sigma_y + C Pi C^T` had to be regularized.
    pub regularized: Vec<usize>,
}

/// Weighted estimate with `W_k = (Sigma_y + C Pi C^T)^{-1}` over the first
/// `count` keyframes. Correlation between keyframe errors is ignored.
pub fn estimate_theta_weighted(
    reg: &Regressor,
    budget: &NoiseBudget,
    model: &LtvModel,
    count: usize,
) -> Result<WeightedEstimate> {
    if !model.d.is_zero() {
        return Err(Error::UnsupportedFeedforward);
    }
    if count > reg.len() {
        return Err(Error::Shape(format!("{count} keyframes requested, {} available", reg.len())));
    }
    let mut regularized = Vec::new();
    let mut whiteners = Vec::with_capacity(count);
    for (k, &i) in budget.grid.keyframes().iter().take(count).enumerate() {
        let c = model.c(budget.grid.time(i));
        let base = symmetrize(&(&budget.sigma_y + &c * &budget.pi[i] * c.transpose()));
        let l = match whitening(&base, "weight base") {
            Ok(l) => l,
            Err(_) => {
                regularized.push(k);
                let p = base.nrows();
                whitening(&(base + DMatrix::<f64>::identity(p, p) * 1e-12), "weight base")?
            }
        };
        whiteners.push(l);
    }
    Ok(WeightedEstimate { theta: solve_whitened(reg, &whiteners)?, regularized })
}

/// Estimate with explicit per-keyframe weight matrices `W_k` (positive definite).
pub fn estimate_theta_matrix_weights(reg: &Regressor, weights: &[DMatrix<f64>]) -> Result<DVector<f64>> {
    let whiteners = weights
        .iter()
        .map(|w| {
            let inv = w.clone().try_inverse().ok_or_else(|| Error::InvalidInput("weight is singular".into()))?;
            whitening(&inv, "weight inverse")
        })
        .collect::<Result<Vec<_>>>()?;
    solve_whitened(reg, &whiteners)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ltv::{sample_measurements, simulate, MatrixFn};
    use crate::preint::preintegrate_all;

    fn scalar(v: f64) -> MatrixFn {
        MatrixFn::Constant(DMatrix::from_element(1, 1, v))
    }

    fn tv_model() -> LtvModel {
        use crate::ltv::Harmonic;
        LtvModel::new(
            MatrixFn::Sinusoid {
                offset: DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -1.5, -0.2]),
                harmonics: vec![Harmonic { amplitude: DMatrix::from_row_slice(2, 2, &[0.3, 0.0, 0.5, 0.0]), freq: 1.1, phase: 0.2 }],
            },
            MatrixFn::Constant(DMatrix::from_row_slice(2, 1, &[0.0, 1.0])),
            MatrixFn::Constant(DMatrix::from_row_slice(1, 2, &[1.0, 0.0])),
            MatrixFn::zeros(1, 1),
        )
        .unwrap()
    }

    struct Setup {
        model: LtvModel,
        meas: MeasurementSet,
        x: SignalTrajectory,
    }

    fn noise_free(model: LtvModel, x0: &[f64]) -> Setup {
        let grid = TimeGrid::uniform(0.0, 1e-3, 4000, 200).unwrap();
        let u = SignalTrajectory::sample(&grid, |t| DVector::from_element(model.m, (0.9 * t).cos()));
        let x = simulate(&model, &DVector::from_column_slice(x0), &u).unwrap();
        let meas = sample_measurements(&model, &x, &u, &DMatrix::zeros(model.m, model.m), &DMatrix::zeros(model.p, model.p), 1).unwrap();
        Setup { model, meas, x }
    }

    #[test]
    fn zero_dynamics_extension() {
        let model = LtvModel::new(MatrixFn::zeros(2, 2), MatrixFn::identity(2), MatrixFn::identity(2), MatrixFn::zeros(2, 2)).unwrap();
        let grid = TimeGrid::uniform(0.0, 1e-2, 200, 50).unwrap();
        let c = DVector::from_vec(vec![0.5, 1.0]);
        let xi0 = DVector::from_vec(vec![-1.0, 2.0]);
        let ext = run_extension(&model, &SignalTrajectory::constant(&grid, c.clone()), &xi0).unwrap();
        for i in 0..grid.len() {
            assert_eq!(ext.omega[i], DMatrix::identity(2, 2));
            assert!((&ext.xi[i] - (&xi0 + &c * grid.time(i))).norm() < 1e-12);
        }
    }

    #[test]
    fn omega_is_product_of_segment_transitions() {
        let s = noise_free(tv_model(), &[1.0, 0.0]);
        let ext = run_extension(&s.model, &s.meas.u, &DVector::zeros(2)).unwrap();
        let segs = preintegrate_all(&s.model, &s.meas.u).unwrap();
        let mut prod = DMatrix::<f64>::identity(2, 2);
        for (k, seg) in segs.iter().enumerate() {
            prod = &seg.f * prod;
            let om = &ext.omega[s.meas.grid.keyframes()[k + 1]];
            assert!((om - &prod).norm() / om.norm() < 1e-8);
        }
        assert!(ext.ill_conditioned_keyframes().is_empty());
    }

    #[test]
    fn regressor_identities() {
        let s = noise_free(tv_model(), &[0.7, -0.4]);
        let xi0 = DVector::from_vec(vec![0.3, 0.1]);
        let ext = run_extension(&s.model, &s.meas.u, &xi0).unwrap();
        let reg = build_regressor(&s.meas, &ext, &s.model).unwrap();
        for k in 0..reg.len() {
            assert!((&reg.ybar[k] - &reg.g[k] * &s.x.values[0]).norm() < 1e-9);
        }
        // xi0 = 0 drops the Omega xi0 term
        let ext0 = run_extension(&s.model, &s.meas.u, &DVector::zeros(2)).unwrap();
        let reg0 = build_regressor(&s.meas, &ext0, &s.model).unwrap();
        for (k, &i) in s.meas.grid.keyframes().iter().enumerate() {
            let expected = &s.meas.y[k] - s.model.c(s.meas.grid.time(i)) * &ext0.xi[i];
            assert!((&reg0.ybar[k] - expected).norm() < 1e-15);
        }
        // x(t_0) = 0 with xi0 = 0: the regressor output vanishes
        let z = noise_free(tv_model(), &[0.0, 0.0]);
        let extz = run_extension(&z.model, &z.meas.u, &DVector::zeros(2)).unwrap();
        let regz = build_regressor(&z.meas, &extz, &z.model).unwrap();
        assert!(regz.ybar.iter().all(|y| y.norm() < 1e-10));
    }

    #[test]
    fn theta_and_reconstruction_recover_truth() {
        let s = noise_free(tv_model(), &[0.7, -0.4]);
        for xi0 in [DVector::zeros(2), DVector::from_vec(vec![2.0, -3.0])] {
            let ext = run_extension(&s.model, &s.meas.u, &xi0).unwrap();
            let reg = build_regressor(&s.meas, &ext, &s.model).unwrap();
            let theta = estimate_theta(&reg, &vec![1.0; reg.len() - 1]).unwrap();
            assert!((&theta - &s.x.values[0]).norm() < 1e-7);
            let xs = reconstruct_state(&ext, &theta);
            for (k, &i) in s.meas.grid.keyframes().iter().enumerate() {
                assert!((&xs[k] - &s.x.values[i]).norm() < 1e-7);
            }
            let same = reconstruct_state(&ext, &xi0);
            for (k, &i) in s.meas.grid.keyframes().iter().enumerate() {
                assert_eq!(same[k], ext.xi[i]);
            }
        }
    }

    #[test]
    fn single_square_keyframe_inverts() {
        let reg = Regressor {
            times: vec![0.0],
            ybar: vec![DVector::from_vec(vec![1.0, 2.0])],
            g: vec![DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 0.0, 4.0])],
        };
        let theta = estimate_theta(&reg, &[3.0]).unwrap();
        let expected = reg.g[0].clone().try_inverse().unwrap() * &reg.ybar[0];
        assert!((theta - expected).norm() < 1e-14);
    }

    #[test]
    fn duplicated_keyframe_weight_semantics() {
        let g = |a: f64, b: f64| DMatrix::from_row_slice(1, 2, &[a, b]);
        let y = |v: f64| DVector::from_element(1, v);
        let doubled = Regressor { times: vec![0.0, 1.0], ybar: vec![y(1.0), y(0.3)], g: vec![g(1.0, 0.5), g(0.2, 1.0)] };
        let copies = Regressor {
            times: vec![0.0, 0.0, 1.0],
            ybar: vec![y(1.0), y(1.0), y(0.3)],
            g: vec![g(1.0, 0.5), g(1.0, 0.5), g(0.2, 1.0)],
        };
        let a = estimate_theta(&doubled, &[2.0, 0.7]).unwrap();
        let b = estimate_theta(&copies, &[1.0, 1.0, 0.7]).unwrap();
        assert!((a - b).norm() < 1e-12);
    }

    #[test]
    fn unobservable_regression_is_rank_deficient() {
        let model = LtvModel::new(scalar(0.0), scalar(1.0), scalar(0.0), scalar(0.0)).unwrap();
        let s = noise_free(model, &[1.0]);
        let ext = run_extension(&s.model, &s.meas.u, &DVector::zeros(1)).unwrap();
        let reg = build_regressor(&s.meas, &ext, &s.model).unwrap();
        assert_eq!(estimate_theta(&reg, &[1.0; 5]).unwrap_err(), Error::RankDeficient { nullspace: 1 });
    }

    #[test]
    fn noise_budget_closed_forms() {
        let grid = TimeGrid::uniform(0.0, 1e-3, 2000, 500).unwrap();
        let zero = propagate_noise(&LtvModel::new(scalar(-0.3), scalar(1.0), scalar(1.0), scalar(0.0)).unwrap(), &grid, &DMatrix::zeros(1, 1), &DMatrix::zeros(1, 1)).unwrap();
        assert!(zero.pi.iter().all(|p| p[(0, 0)] == 0.0));

        let q = 0.8;
        let sq = DMatrix::from_element(1, 1, q);
        let flat = propagate_noise(&LtvModel::new(scalar(0.0), scalar(1.0), scalar(1.0), scalar(0.0)).unwrap(), &grid, &sq, &sq).unwrap();
        for i in (0..grid.len()).step_by(97) {
            assert!((flat.pi[i][(0, 0)] - q * grid.time(i)).abs() < 1e-9);
        }
        let a = 0.4;
        let grow = propagate_noise(&LtvModel::new(scalar(a), scalar(1.0), scalar(1.0), scalar(0.0)).unwrap(), &grid, &sq, &sq).unwrap();
        for i in (0..grid.len()).step_by(97) {
            let t = grid.time(i);
            assert!((grow.pi[i][(0, 0)] - q * ((2.0 * a * t).exp() - 1.0) / (2.0 * a)).abs() < 1e-8);
        }
    }

    #[test]
    fn budget_stays_psd() {
        let model = tv_model();
        let grid = TimeGrid::uniform(0.0, 1e-3, 3000, 300).unwrap();
        let b = propagate_noise(&model, &grid, &DMatrix::from_element(1, 1, 0.2), &DMatrix::from_element(1, 1, 0.1)).unwrap();
        assert_eq!(b.pi[0], DMatrix::zeros(2, 2));
        for p in b.at_keyframes() {
            assert!((&p - p.transpose()).norm() <= 1e-10);
            assert!(crate::linalg::min_eigenvalue(&p) >= -1e-10);
        }
    }

    #[test]
    fn weighted_reduces_to_plain_and_is_scale_invariant() {
        let s = noise_free(tv_model(), &[0.2, 0.9]);
        let ext = run_extension(&s.model, &s.meas.u, &DVector::zeros(2)).unwrap();
        let mut reg = build_regressor(&s.meas, &ext, &s.model).unwrap();
        // perturb so the weighting actually matters
        for (k, y) in reg.ybar.iter_mut().enumerate() {
            y[0] += 0.01 * ((k * 7 % 5) as f64 - 2.0);
        }
        let n = reg.len();
        let budget = NoiseBudget { grid: s.meas.grid.clone(), pi: vec![DMatrix::zeros(2, 2); s.meas.grid.len()], sigma_y: DMatrix::identity(1, 1) };
        let w = estimate_theta_weighted(&reg, &budget, &s.model, n).unwrap();
        let plain = estimate_theta(&reg, &vec![1.0; n]).unwrap();
        assert!((&w.theta - &plain).norm() < 1e-10);

        let weights: Vec<DMatrix<f64>> = (0..n).map(|k| DMatrix::from_element(1, 1, 1.0 + k as f64)).collect();
        let scaled: Vec<DMatrix<f64>> = weights.iter().map(|m| m * 37.5).collect();
        let a = estimate_theta_matrix_weights(&reg, &weights).unwrap();
        let b = estimate_theta_matrix_weights(&reg, &scaled).unwrap();
        assert!((a - b).norm() < 1e-10);
    }

    #[test]
    fn weighted_rejects_feedforward() {
        let model = LtvModel::new(scalar(0.0), scalar(1.0), scalar(1.0), scalar(0.5)).unwrap();
        let s = noise_free(model, &[1.0]);
        let ext = run_extension(&s.model, &s.meas.u, &DVector::zeros(1)).unwrap();
        let reg = build_regressor(&s.meas, &ext, &s.model).unwrap();
        let budget = propagate_noise(&s.model, &s.meas.grid, &DMatrix::zeros(1, 1), &DMatrix::zeros(1, 1)).unwrap();
        assert_eq!(estimate_theta_weighted(&reg, &budget, &s.model, 3).unwrap_err(), Error::UnsupportedFeedforward);
    }

    #[test]
    fn singular_weight_base_is_regularized() {
        let model = LtvModel::new(scalar(0.0), scalar(1.0), scalar(1.0), scalar(0.0)).unwrap();
        let s = noise_free(model, &[1.0]);
        let ext = run_extension(&s.model, &s.meas.u, &DVector::zeros(1)).unwrap();
        let reg = build_regressor(&s.meas, &ext, &s.model).unwrap();
        // Sigma_y = 0 and Pi(t_0) = 0 make the first base exactly singular.
        let budget = propagate_noise(&s.model, &s.meas.grid, &DMatrix::from_element(1, 1, 0.1), &DMatrix::zeros(1, 1)).unwrap();
        let w = estimate_theta_weighted(&reg, &budget, &s.model, 4).unwrap();
        assert_eq!(w.regularized, vec![0]);
        assert!((w.theta[0] - 1.0).abs() < 1e-6);
    }
}
