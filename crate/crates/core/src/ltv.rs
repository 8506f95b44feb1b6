//! Linear time-varying models, ground-truth simulation and multi-rate noisy
//! measurements.
//!
//! Inputs are zero-order-hold signals: the value stored at grid point `i`
//! drives the dynamics on `[t_i, t_{i+1})`.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::grid::TimeGrid;
use crate::integrate::{integrate_with, Span};
use crate::linalg::{check_psd, psd_sqrt};

/// One sinusoidal component `amplitude * sin(freq * t + phase)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Harmonic {
    pub amplitude: DMatrix<f64>,
    pub freq: f64,
    pub phase: f64,
}

/// Time-indexed matrix family.
#[derive(Debug, Clone, PartialEq)]
pub enum MatrixFn {
    Constant(DMatrix<f64>),
    Sinusoid { offset: DMatrix<f64>, harmonics: Vec<Harmonic> },
    /// `values[j]` holds on `[breaks[j-1], breaks[j])`; `values.len() == breaks.len() + 1`.
    Piecewise { breaks: Vec<f64>, values: Vec<DMatrix<f64>> },
    /// Samples on a uniform grid, linearly interpolated and clamped at the ends.
    Table { t0: f64, dt: f64, values: Vec<DMatrix<f64>> },
}

impl MatrixFn {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        MatrixFn::Constant(DMatrix::zeros(rows, cols))
    }

    pub fn identity(n: usize) -> Self {
        MatrixFn::Constant(DMatrix::identity(n, n))
    }

    pub fn shape(&self) -> (usize, usize) {
        match self {
            MatrixFn::Constant(m) => m.shape(),
            MatrixFn::Sinusoid { offset, .. } => offset.shape(),
            MatrixFn::Piecewise { values, .. } | MatrixFn::Table { values, .. } => {
                values.first().map(|m| m.shape()).unwrap_or((0, 0))
            }
        }
    }

    pub fn eval(&self, t: f64) -> DMatrix<f64> {
        match self {
            MatrixFn::Constant(m) => m.clone(),
            MatrixFn::Sinusoid { offset, harmonics } => {
                let mut out = offset.clone();
                for h in harmonics {
                    out += &h.amplitude * (h.freq * t + h.phase).sin();
                }
                out
            }
            MatrixFn::Piecewise { breaks, values } => {
                let j = breaks.partition_point(|&b| b <= t);
                values[j].clone()
            }
            MatrixFn::Table { t0, dt, values } => {
                let s = ((t - t0) / dt).max(0.0);
                let i = s.floor() as usize;
                if i + 1 >= values.len() {
                    return values[values.len() - 1].clone();
                }
                let w = s - i as f64;
                &values[i] * (1.0 - w) + &values[i + 1] * w
            }
        }
    }

    /// True when the family is identically zero.
    pub fn is_zero(&self) -> bool {
        let z = |m: &DMatrix<f64>| m.iter().all(|&v| v == 0.0);
        match self {
            MatrixFn::Constant(m) => z(m),
            MatrixFn::Sinusoid { offset, harmonics } => z(offset) && harmonics.iter().all(|h| z(&h.amplitude)),
            MatrixFn::Piecewise { values, .. } | MatrixFn::Table { values, .. } => values.iter().all(z),
        }
    }

    fn validate(&self, name: &str, rows: usize, cols: usize) -> Result<()> {
        let check = |m: &DMatrix<f64>| -> Result<()> {
            if m.shape() != (rows, cols) {
                return Err(Error::Shape(format!("{name} must be {rows}x{cols}, got {}x{}", m.nrows(), m.ncols())));
            }
            if m.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidInput(format!("{name} has non-finite entries")));
            }
            Ok(())
        };
        match self {
            MatrixFn::Constant(m) => check(m),
            MatrixFn::Sinusoid { offset, harmonics } => {
                check(offset)?;
                harmonics.iter().try_for_each(|h| check(&h.amplitude))
            }
            MatrixFn::Piecewise { breaks, values } => {
                if values.len() != breaks.len() + 1 {
                    return Err(Error::Shape(format!("{name}: piecewise needs one more value than breaks")));
                }
                if breaks.windows(2).any(|w| w[1] <= w[0]) {
                    return Err(Error::InvalidInput(format!("{name}: breaks must increase")));
                }
                values.iter().try_for_each(check)
            }
            MatrixFn::Table { dt, values, .. } => {
                if values.is_empty() || !(*dt > 0.0) {
                    return Err(Error::InvalidInput(format!("{name}: table needs samples and dt > 0")));
                }
                values.iter().try_for_each(check)
            }
        }
    }
}

/// `x' = A_t x + B_t u`, `y = C_t x + D_t u`.
#[derive(Debug, Clone, PartialEq)]
pub struct LtvModel {
    pub n: usize,
    pub m: usize,
    pub p: usize,
    pub a: MatrixFn,
    pub b: MatrixFn,
    pub c: MatrixFn,
    pub d: MatrixFn,
}

impl LtvModel {
    pub fn new(a: MatrixFn, b: MatrixFn, c: MatrixFn, d: MatrixFn) -> Result<Self> {
        let (n, _) = a.shape();
        let (_, m) = b.shape();
        let (p, _) = c.shape();
        let model = Self { n, m, p, a, b, c, d };
        model.validate()?;
        Ok(model)
    }

    pub fn validate(&self) -> Result<()> {
        self.a.validate("A", self.n, self.n)?;
        self.b.validate("B", self.n, self.m)?;
        self.c.validate("C", self.p, self.n)?;
        self.d.validate("D", self.p, self.m)
    }

    pub fn a(&self, t: f64) -> DMatrix<f64> {
        self.a.eval(t)
    }
    pub fn b(&self, t: f64) -> DMatrix<f64> {
        self.b.eval(t)
    }
    pub fn c(&self, t: f64) -> DMatrix<f64> {
        self.c.eval(t)
    }
    pub fn d(&self, t: f64) -> DMatrix<f64> {
        self.d.eval(t)
    }

    /// Noise-free output `C x + D u` at time `t`.
    pub fn output(&self, t: f64, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        self.c(t) * x + self.d(t) * u
    }
}

/// A vector signal with one sample per grid point.
#[derive(Debug, Clone, PartialEq)]
pub struct SignalTrajectory {
    pub grid: TimeGrid,
    pub values: Vec<DVector<f64>>,
}

impl SignalTrajectory {
    pub fn new(grid: TimeGrid, values: Vec<DVector<f64>>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::Shape(format!("signal has {} samples for a grid of {}", values.len(), grid.len())));
        }
        if values.iter().any(|v| v.iter().any(|x| !x.is_finite())) {
            return Err(Error::InvalidInput("signal has non-finite entries".into()));
        }
        Ok(Self { grid, values })
    }

    /// Samples `f` at every grid point.
    pub fn sample(grid: &TimeGrid, f: impl Fn(f64) -> DVector<f64>) -> Self {
        let values = (0..grid.len()).map(|i| f(grid.time(i))).collect();
        Self { grid: grid.clone(), values }
    }

    pub fn constant(grid: &TimeGrid, value: DVector<f64>) -> Self {
        Self { grid: grid.clone(), values: vec![value; grid.len()] }
    }

    pub fn dim(&self) -> usize {
        self.values.first().map(|v| v.len()).unwrap_or(0)
    }

    pub fn at(&self, i: usize) -> &DVector<f64> {
        &self.values[i]
    }

    /// Values at the keyframe indices of the grid.
    pub fn at_keyframes(&self) -> Vec<DVector<f64>> {
        self.grid.keyframes().iter().map(|&i| self.values[i].clone()).collect()
    }
}

/// High-rate noisy inputs plus low-rate noisy outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct MeasurementSet {
    pub grid: TimeGrid,
    /// Noisy output at each keyframe.
    pub y: Vec<DVector<f64>>,
    /// Noisy input on the fine grid.
    pub u: SignalTrajectory,
    pub sigma_u: DMatrix<f64>,
    pub sigma_y: DMatrix<f64>,
    pub seed: u64,
}

impl MeasurementSet {
    pub fn keyframe_times(&self) -> Vec<f64> {
        self.grid.keyframe_times()
    }
}

/// Integrates `x' = A_t x + B_t u` from `x0` over the whole grid.
pub fn simulate(model: &LtvModel, x0: &DVector<f64>, u: &SignalTrajectory) -> Result<SignalTrajectory> {
    if x0.len() != model.n {
        return Err(Error::Shape(format!("x0 has length {}, model has n = {}", x0.len(), model.n)));
    }
    if u.dim() != model.m {
        return Err(Error::Shape(format!("input has dimension {}, model has m = {}", u.dim(), model.m)));
    }
    let grid = &u.grid;
    let values = integrate_with(
        |s, x: &DVector<f64>| model.a(s.t) * x + model.b(s.t) * &u.values[s.step],
        x0,
        Span::full(grid),
        |_, _| {},
    )?;
    Ok(SignalTrajectory { grid: grid.clone(), values })
}

/// Adds white noise to the input (covariance `Sigma_u / dt` per fine step)
/// and to the keyframe outputs (covariance `Sigma_y`).
pub fn sample_measurements(
    model: &LtvModel,
    x: &SignalTrajectory,
    u: &SignalTrajectory,
    sigma_u: &DMatrix<f64>,
    sigma_y: &DMatrix<f64>,
    seed: u64,
) -> Result<MeasurementSet> {
    check_psd(sigma_u, "Sigma_u")?;
    check_psd(sigma_y, "Sigma_y")?;
    if sigma_u.nrows() != model.m || sigma_y.nrows() != model.p {
        return Err(Error::Shape("noise covariances do not match the model dimensions".into()));
    }
    let grid = &u.grid;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lu = psd_sqrt(&(sigma_u / grid.dt()));
    let ly = psd_sqrt(sigma_y);

    let noisy_u: Vec<DVector<f64>> = u
        .values
        .iter()
        .map(|ui| ui + &lu * standard_normal(&mut rng, model.m))
        .collect();
    let y = grid
        .keyframes()
        .iter()
        .map(|&i| {
            let t = grid.time(i);
            model.output(t, &x.values[i], &u.values[i]) + &ly * standard_normal(&mut rng, model.p)
        })
        .collect();
    Ok(MeasurementSet {
        grid: grid.clone(),
        y,
        u: SignalTrajectory { grid: grid.clone(), values: noisy_u },
        sigma_u: sigma_u.clone(),
        sigma_y: sigma_y.clone(),
        seed,
    })
}

pub fn standard_normal(rng: &mut ChaCha8Rng, n: usize) -> DVector<f64> {
    DVector::from_iterator(n, (0..n).map(|_| StandardNormal.sample(rng)))
}

/// Independent stream seed for trial `index` of a run seeded with `seed`.
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    // splitmix64 finalizer over the pair
    let mut z = seed ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle;

    fn scalar(v: f64) -> MatrixFn {
        MatrixFn::Constant(DMatrix::from_element(1, 1, v))
    }

    #[test]
    fn pure_integrator() {
        let grid = TimeGrid::uniform(0.0, 1e-2, 300, 100).unwrap();
        let model = LtvModel::new(MatrixFn::zeros(2, 2), MatrixFn::identity(2), MatrixFn::identity(2), MatrixFn::zeros(2, 2)).unwrap();
        let c = DVector::from_vec(vec![0.5, -2.0]);
        let x0 = DVector::from_vec(vec![1.0, 1.0]);
        let x = simulate(&model, &x0, &SignalTrajectory::constant(&grid, c.clone())).unwrap();
        for i in 0..grid.len() {
            let expected = &x0 + &c * (grid.time(i) - grid.t0());
            assert!((&x.values[i] - expected).norm() < 1e-10);
        }
    }

    #[test]
    fn constant_a_matches_expm() {
        let a = DMatrix::from_row_slice(2, 2, &[-0.2, 1.0, -1.5, -0.1]);
        let grid = TimeGrid::uniform(0.0, 1e-3, 3000, 1000).unwrap();
        let model = LtvModel::new(MatrixFn::Constant(a.clone()), MatrixFn::zeros(2, 1), MatrixFn::zeros(1, 2), MatrixFn::zeros(1, 1)).unwrap();
        let x0 = DVector::from_vec(vec![1.0, -0.5]);
        let x = simulate(&model, &x0, &SignalTrajectory::constant(&grid, DVector::zeros(1))).unwrap();
        let expected = oracle::expm(&(a * 3.0)) * &x0;
        assert!((&x.values[3000] - &expected).norm() / expected.norm() < 1e-8);
    }

    #[test]
    fn scalar_decay() {
        let grid = TimeGrid::uniform(0.0, 1e-3, 1000, 1000).unwrap();
        let model = LtvModel::new(scalar(-1.0), scalar(0.0), scalar(1.0), scalar(0.0)).unwrap();
        let x = simulate(&model, &DVector::from_element(1, 1.0), &SignalTrajectory::constant(&grid, DVector::zeros(1))).unwrap();
        assert!((x.values[1000][0] - (-1f64).exp()).abs() < 1e-9);
    }

    #[test]
    fn rejects_shape_errors() {
        assert!(LtvModel::new(MatrixFn::zeros(2, 2), MatrixFn::zeros(3, 1), MatrixFn::zeros(1, 2), MatrixFn::zeros(1, 1)).is_err());
    }

    #[test]
    fn matrix_families() {
        let pw = MatrixFn::Piecewise { breaks: vec![1.0, 2.0], values: vec![DMatrix::from_element(1, 1, 0.0), DMatrix::from_element(1, 1, 1.0), DMatrix::from_element(1, 1, 2.0)] };
        assert_eq!(pw.eval(0.5)[(0, 0)], 0.0);
        assert_eq!(pw.eval(1.0)[(0, 0)], 1.0);
        assert_eq!(pw.eval(5.0)[(0, 0)], 2.0);
        let table = MatrixFn::Table { t0: 0.0, dt: 1.0, values: vec![DMatrix::from_element(1, 1, 0.0), DMatrix::from_element(1, 1, 4.0)] };
        assert!((table.eval(0.25)[(0, 0)] - 1.0).abs() < 1e-15);
        assert_eq!(table.eval(3.0)[(0, 0)], 4.0);
        let sine = MatrixFn::Sinusoid {
            offset: DMatrix::from_element(1, 1, 1.0),
            harmonics: vec![Harmonic { amplitude: DMatrix::from_element(1, 1, 2.0), freq: 3.0, phase: 0.5 }],
        };
        assert!((sine.eval(0.7)[(0, 0)] - (1.0 + 2.0 * (3.0f64 * 0.7 + 0.5).sin())).abs() < 1e-15);
    }

    fn scalar_setup(n_keyframes: usize) -> (LtvModel, TimeGrid, SignalTrajectory, SignalTrajectory) {
        let grid = TimeGrid::uniform(0.0, 1e-3, n_keyframes - 1, 1).unwrap();
        let model = LtvModel::new(scalar(0.0), scalar(1.0), scalar(1.0), scalar(0.0)).unwrap();
        let u = SignalTrajectory::constant(&grid, DVector::from_element(1, 0.3));
        let x = simulate(&model, &DVector::from_element(1, 2.0), &u).unwrap();
        (model, grid, u, x)
    }

    #[test]
    fn noise_free_measurements_are_exact() {
        let (model, grid, u, x) = scalar_setup(50);
        let zero = DMatrix::zeros(1, 1);
        let meas = sample_measurements(&model, &x, &u, &zero, &zero, 3).unwrap();
        assert_eq!(meas.u.values, u.values);
        for (k, &i) in grid.keyframes().iter().enumerate() {
            assert_eq!(meas.y[k], model.output(grid.time(i), &x.values[i], &u.values[i]));
        }
    }

    #[test]
    fn output_noise_variance() {
        let (model, _grid, u, x) = scalar_setup(100_000);
        let meas = sample_measurements(&model, &x, &u, &DMatrix::zeros(1, 1), &DMatrix::from_element(1, 1, 1.0), 11).unwrap();
        let kf = x.grid.keyframes();
        let res: Vec<f64> = meas.y.iter().zip(kf).map(|(y, &i)| y[0] - x.values[i][0]).collect();
        let mean = res.iter().sum::<f64>() / res.len() as f64;
        let var = res.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (res.len() - 1) as f64;
        assert!((0.98..=1.02).contains(&var), "{var}");
    }

    #[test]
    fn same_seed_same_measurements() {
        let (model, _, u, x) = scalar_setup(200);
        let s = DMatrix::from_element(1, 1, 0.1);
        let a = sample_measurements(&model, &x, &u, &s, &s, 42).unwrap();
        let b = sample_measurements(&model, &x, &u, &s, &s, 42).unwrap();
        let bits = |m: &MeasurementSet| -> Vec<u64> {
            m.y.iter().chain(m.u.values.iter()).flat_map(|v| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>()).collect()
        };
        assert_eq!(bits(&a), bits(&b));
        let c = sample_measurements(&model, &x, &u, &s, &s, 43).unwrap();
        assert_ne!(bits(&a), bits(&c));
    }

    #[test]
    fn rejects_indefinite_covariance() {
        let (model, _, u, x) = scalar_setup(10);
        let err = sample_measurements(&model, &x, &u, &DMatrix::from_element(1, 1, -1.0), &DMatrix::zeros(1, 1), 0).unwrap_err();
        assert!(matches!(err, Error::InvalidCovariance(_)));
    }

    #[test]
    fn integrated_input_noise_scales_with_window() {
        // Var(int eps_u) over a window T should approach Sigma_u * T for two step sizes.
        let q = 0.7;
        let window = 0.5;
        let ratio_for = |dt: f64| {
            let steps = (window / dt).round() as usize;
            let grid = TimeGrid::uniform(0.0, dt, steps, steps).unwrap();
            let model = LtvModel::new(scalar(0.0), scalar(1.0), scalar(1.0), scalar(0.0)).unwrap();
            let u = SignalTrajectory::constant(&grid, DVector::zeros(1));
            let x = simulate(&model, &DVector::zeros(1), &u).unwrap();
            let trials = 2000;
            let mut acc = 0.0;
            for trial in 0..trials {
                let m = sample_measurements(&model, &x, &u, &DMatrix::from_element(1, 1, q), &DMatrix::zeros(1, 1), derive_seed(5, trial)).unwrap();
                let integral: f64 = m.u.values[..steps].iter().map(|v| v[0] * dt).sum();
                acc += integral * integral;
            }
            acc / trials as f64 / (q * window)
        };
        let (r1, r2) = (ratio_for(1e-2), ratio_for(5e-3));
        assert!((r1 - 1.0).abs() < 0.1 && (r2 - 1.0).abs() < 0.1, "{r1} {r2}");
    }
}
