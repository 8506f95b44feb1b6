//! Scenario files: TOML with a versioned schema. Unknown keys are errors.

use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;

use preobs_core::grid::TimeGrid;
use preobs_core::ltv::{Harmonic, LtvModel, MatrixFn};
use preobs_core::manifold::imu::{ImuBias, PreintMethod};
use preobs_core::manifold::kinematics::RigidBodySpec;
use preobs_core::manifold::{BatchMode, ExtendedPose};
use preobs_core::so3::exp;

use crate::error::CliError;

pub const SCHEMA_VERSION: u32 = 1;

/// Scenarios shipped with the binary, addressable by name.
pub const BUNDLED: &[(&str, &str)] = &[
    ("ltv-scalar", include_str!("../scenarios/ltv-scalar.toml")),
    ("ltv-sine", include_str!("../scenarios/ltv-sine.toml")),
    ("ltv-async", include_str!("../scenarios/ltv-async.toml")),
    ("scalar-mc", include_str!("../scenarios/scalar-mc.toml")),
    ("imu-circle", include_str!("../scenarios/imu-circle.toml")),
    ("imu-wobble", include_str!("../scenarios/imu-wobble.toml")),
];

type Rows = Vec<Vec<f64>>;

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioFile {
    pub schema: u32,
    pub name: String,
    pub grid: GridSpec,
    pub system: SystemSpec,
    #[serde(default)]
    pub noise: NoiseSpec,
    #[serde(default)]
    pub estimator: EstimatorSpec,
    #[serde(default)]
    pub output: OutputSpec,
    #[serde(default)]
    pub montecarlo: MonteCarloSpec,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    #[serde(default)]
    pub t0: f64,
    pub dt: f64,
    pub horizon: f64,
    /// Uniform keyframe spacing in seconds.
    pub keyframe_every: Option<f64>,
    /// Explicit keyframe instants.
    pub keyframe_times: Option<Vec<f64>>,
    /// Random gaps drawn uniformly, rounded to the grid.
    pub keyframe_random: Option<RandomGaps>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RandomGaps {
    pub min_gap: f64,
    pub max_gap: f64,
    pub seed: u64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemSpec {
    pub ltv: Option<LtvSpec>,
    pub rigid_body: Option<RigidSpec>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LtvSpec {
    pub a: MatrixSpec,
    pub b: MatrixSpec,
    pub c: MatrixSpec,
    pub d: Option<MatrixSpec>,
    pub x0: Vec<f64>,
    /// Column input `u(t)`; zero when absent.
    pub input: Option<MatrixSpec>,
}

/// One of `constant`, `offset` + `harmonics`, or `breaks` + `values`.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MatrixSpec {
    pub constant: Option<Rows>,
    pub offset: Option<Rows>,
    pub harmonics: Option<Vec<HarmonicSpec>>,
    pub breaks: Option<Vec<f64>>,
    pub values: Option<Vec<Rows>>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HarmonicSpec {
    pub amplitude: Rows,
    pub freq: f64,
    #[serde(default)]
    pub phase: f64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RigidSpec {
    /// Level circle shorthand; replaces `omega` and `accel`.
    pub circle: Option<CircleSpec>,
    pub omega: Option<VectorSpec>,
    pub accel: Option<VectorSpec>,
    /// Initial attitude as a rotation vector.
    #[serde(default)]
    pub rotation0: [f64; 3],
    pub velocity0: Option<[f64; 3]>,
    #[serde(default)]
    pub position0: [f64; 3],
    pub gravity: Option<[f64; 3]>,
    pub landmarks: Vec<[f64; 3]>,
    #[serde(default)]
    pub bias_gyro: [f64; 3],
    #[serde(default)]
    pub bias_accel: [f64; 3],
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CircleSpec {
    pub speed: f64,
    pub rate: f64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VectorSpec {
    pub constant: Option<[f64; 3]>,
    pub offset: Option<[f64; 3]>,
    pub harmonics: Option<Vec<VectorHarmonic>>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VectorHarmonic {
    pub amplitude: [f64; 3],
    pub freq: f64,
    #[serde(default)]
    pub phase: f64,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSpec {
    pub sigma_u: Option<Rows>,
    pub sigma_y: Option<Rows>,
    #[serde(default)]
    pub gyro_variance: f64,
    #[serde(default)]
    pub accel_variance: f64,
    #[serde(default)]
    pub landmark_variance: f64,
    pub seed: Option<u64>,
}

#[derive(Debug, Default, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimatorSpec {
    /// Estimators run when `--estimator` is not given; all applicable ones by default.
    pub run: Option<Vec<String>>,
    /// Forgetting factor for the measurement weights; 1 means uniform.
    pub forgetting: Option<f64>,
    /// Weight of the dynamics residuals in the soft batch.
    pub gamma_prime: Option<f64>,
    pub xi0: Option<Vec<f64>>,
    /// Observer initial estimate.
    pub x0_guess: Option<Vec<f64>>,
    pub p0: Option<Rows>,
    pub q: Option<Rows>,
    pub r: Option<Rows>,
    /// Variance assigned to each kinematic residual of the manifold batch.
    pub kinematic_variance: Option<f64>,
    /// Landmark cost variance when it differs from the data noise.
    pub landmark_variance: Option<f64>,
    pub batch_mode: Option<BatchMode>,
    #[serde(default)]
    pub unknown_landmarks: bool,
    pub preint_method: Option<PreintMethod>,
    pub max_iterations: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSpec {
    pub dir: Option<String>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MonteCarloSpec {
    pub trials: Option<usize>,
}

/// Validated scenario.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub name: String,
    pub grid: TimeGrid,
    pub system: System,
    pub noise: Noise,
    pub estimator: EstimatorSpec,
    pub output_dir: Option<PathBuf>,
    pub trials: Option<usize>,
}

#[derive(Debug, Clone)]
pub enum System {
    Ltv { model: LtvModel, x0: nalgebra::DVector<f64>, input: MatrixFn },
    RigidBody { spec: RigidBodySpec, landmarks: Vec<Vector3<f64>>, bias: ImuBias },
}

#[derive(Debug, Clone)]
pub struct Noise {
    pub sigma_u: DMatrix<f64>,
    pub sigma_y: DMatrix<f64>,
    pub gyro: Matrix3<f64>,
    pub accel: Matrix3<f64>,
    pub landmark: Matrix3<f64>,
    pub seed: u64,
}

impl Noise {
    pub fn is_zero(&self) -> bool {
        self.sigma_u.iter().chain(self.sigma_y.iter()).all(|&v| v == 0.0)
            && self.gyro.iter().chain(self.accel.iter()).chain(self.landmark.iter()).all(|&v| v == 0.0)
    }
}

impl Scenario {
    pub fn is_manifold(&self) -> bool {
        matches!(self.system, System::RigidBody { .. })
    }
}

fn invalid(field: &str, msg: impl std::fmt::Display) -> CliError {
    CliError::Validation(format!("{field}: {msg}"))
}

fn matrix(field: &str, rows: &Rows) -> Result<DMatrix<f64>, CliError> {
    let r = rows.len();
    let c = rows.first().map_or(0, |x| x.len());
    if r == 0 || c == 0 || rows.iter().any(|x| x.len() != c) {
        return Err(invalid(field, "must be a non-empty rectangular array of rows"));
    }
    if rows.iter().flatten().any(|v| !v.is_finite()) {
        return Err(invalid(field, "entries must be finite"));
    }
    Ok(DMatrix::from_fn(r, c, |i, j| rows[i][j]))
}

fn matrix_fn(field: &str, s: &MatrixSpec) -> Result<MatrixFn, CliError> {
    match (&s.constant, &s.offset, &s.breaks) {
        (Some(m), None, None) if s.harmonics.is_none() && s.values.is_none() => Ok(MatrixFn::Constant(matrix(field, m)?)),
        (None, Some(o), None) if s.values.is_none() => {
            let offset = matrix(&format!("{field}.offset"), o)?;
            let harmonics = s
                .harmonics
                .iter()
                .flatten()
                .enumerate()
                .map(|(i, h)| {
                    let amplitude = matrix(&format!("{field}.harmonics[{i}].amplitude"), &h.amplitude)?;
                    if amplitude.shape() != offset.shape() {
                        return Err(invalid(&format!("{field}.harmonics[{i}].amplitude"), "shape differs from offset"));
                    }
                    Ok(Harmonic { amplitude, freq: h.freq, phase: h.phase })
                })
                .collect::<Result<_, _>>()?;
            Ok(MatrixFn::Sinusoid { offset, harmonics })
        }
        (None, None, Some(b)) if s.harmonics.is_none() => {
            let values = s
                .values
                .as_ref()
                .ok_or_else(|| invalid(field, "piecewise form needs `values`"))?
                .iter()
                .enumerate()
                .map(|(i, v)| matrix(&format!("{field}.values[{i}]"), v))
                .collect::<Result<Vec<_>, _>>()?;
            Ok(MatrixFn::Piecewise { breaks: b.clone(), values })
        }
        _ => Err(invalid(field, "give exactly one of `constant`, `offset` (+ `harmonics`), or `breaks` + `values`")),
    }
}

fn vector_fn(field: &str, s: &VectorSpec) -> Result<MatrixFn, CliError> {
    let col = |v: &[f64; 3]| DMatrix::from_column_slice(3, 1, v);
    match (&s.constant, &s.offset) {
        (Some(c), None) if s.harmonics.is_none() => Ok(MatrixFn::Constant(col(c))),
        (None, Some(o)) => Ok(MatrixFn::Sinusoid {
            offset: col(o),
            harmonics: s
                .harmonics
                .iter()
                .flatten()
                .map(|h| Harmonic { amplitude: col(&h.amplitude), freq: h.freq, phase: h.phase })
                .collect(),
        }),
        _ => Err(invalid(field, "give either `constant` or `offset` (+ `harmonics`)")),
    }
}

fn v3(a: &[f64; 3]) -> Vector3<f64> {
    Vector3::new(a[0], a[1], a[2])
}

fn build_grid(g: &GridSpec) -> Result<TimeGrid, CliError> {
    if !(g.dt > 0.0) || !g.dt.is_finite() {
        return Err(invalid("grid.dt", "must be positive"));
    }
    if !(g.horizon > 0.0) || !g.horizon.is_finite() {
        return Err(invalid("grid.horizon", "must be positive"));
    }
    let steps = g.horizon / g.dt;
    let n_steps = steps.round() as usize;
    if (steps - n_steps as f64).abs() > 1e-6 * steps.max(1.0) {
        return Err(invalid("grid.horizon", format!("{} is not a multiple of dt = {}", g.horizon, g.dt)));
    }
    let forms = [g.keyframe_every.is_some(), g.keyframe_times.is_some(), g.keyframe_random.is_some()];
    if forms.iter().filter(|&&x| x).count() != 1 {
        return Err(invalid("grid", "give exactly one of keyframe_every, keyframe_times, keyframe_random"));
    }
    let times: Vec<f64> = if let Some(every) = g.keyframe_every {
        let s = every / g.dt;
        let k = s.round() as usize;
        if k == 0 || (s - k as f64).abs() > 1e-6 * s.max(1.0) {
            return Err(invalid("grid.keyframe_every", format!("{every} is not a positive multiple of dt")));
        }
        return TimeGrid::uniform(g.t0, g.dt, n_steps, k).map_err(|e| invalid("grid", e));
    } else if let Some(t) = &g.keyframe_times {
        t.clone()
    } else {
        let r = g.keyframe_random.as_ref().expect("checked above");
        if !(r.min_gap >= g.dt) || r.max_gap < r.min_gap {
            return Err(invalid("grid.keyframe_random", "need dt <= min_gap <= max_gap"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(r.seed);
        let mut out = vec![g.t0];
        let mut i = 0usize;
        loop {
            let gap = rng.gen_range(r.min_gap..=r.max_gap);
            i += ((gap / g.dt).round() as usize).max(1);
            if i > n_steps {
                break;
            }
            out.push(g.t0 + i as f64 * g.dt);
        }
        out
    };
    TimeGrid::with_keyframe_times(g.t0, g.dt, n_steps, &times).map_err(|e| invalid("grid.keyframe_times", e))
}

fn square(field: &str, rows: &Option<Rows>, n: usize) -> Result<DMatrix<f64>, CliError> {
    match rows {
        None => Ok(DMatrix::zeros(n, n)),
        Some(r) => {
            let m = matrix(field, r)?;
            if m.shape() != (n, n) {
                return Err(invalid(field, format!("must be {n}x{n}")));
            }
            Ok(m)
        }
    }
}

impl ScenarioFile {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Validation(format!("scenario: {e}")))
    }

    pub fn validate(self) -> Result<Scenario, CliError> {
        if self.schema != SCHEMA_VERSION {
            return Err(invalid("schema", format!("unsupported version {} (expected {SCHEMA_VERSION})", self.schema)));
        }
        if self.name.trim().is_empty() {
            return Err(invalid("name", "must not be empty"));
        }
        let grid = build_grid(&self.grid)?;
        if grid.keyframes().len() < 2 {
            return Err(invalid("grid", "need at least two keyframes"));
        }
        let (system, noise) = match (&self.system.ltv, &self.system.rigid_body) {
            (Some(l), None) => {
                let a = matrix_fn("system.ltv.a", &l.a)?;
                let b = matrix_fn("system.ltv.b", &l.b)?;
                let c = matrix_fn("system.ltv.c", &l.c)?;
                let (n, m, p) = (a.shape().0, b.shape().1, c.shape().0);
                let d = match &l.d {
                    Some(d) => matrix_fn("system.ltv.d", d)?,
                    None => MatrixFn::zeros(p, m),
                };
                let model = LtvModel::new(a, b, c, d).map_err(|e| invalid("system.ltv", e))?;
                if l.x0.len() != n {
                    return Err(invalid("system.ltv.x0", format!("has length {}, A is {n}x{n}", l.x0.len())));
                }
                let input = match &l.input {
                    Some(s) => matrix_fn("system.ltv.input", s)?,
                    None => MatrixFn::zeros(m, 1),
                };
                if input.shape() != (m, 1) {
                    return Err(invalid("system.ltv.input", format!("must be {m}x1")));
                }
                let noise = Noise {
                    sigma_u: square("noise.sigma_u", &self.noise.sigma_u, m)?,
                    sigma_y: square("noise.sigma_y", &self.noise.sigma_y, p)?,
                    gyro: Matrix3::zeros(),
                    accel: Matrix3::zeros(),
                    landmark: Matrix3::zeros(),
                    seed: self.noise.seed.unwrap_or(0),
                };
                self.check_estimator_dims(n, p)?;
                (System::Ltv { model, x0: nalgebra::DVector::from_vec(l.x0.clone()), input }, noise)
            }
            (None, Some(r)) => {
                let gravity = r.gravity.map(|g| v3(&g)).unwrap_or_else(preobs_core::manifold::gravity);
                let mut spec = match (&r.circle, &r.omega, &r.accel) {
                    (Some(c), None, None) => RigidBodySpec::circle(c.speed, c.rate),
                    (None, Some(w), Some(a)) => RigidBodySpec {
                        omega: vector_fn("system.rigid_body.omega", w)?,
                        accel: vector_fn("system.rigid_body.accel", a)?,
                        initial: ExtendedPose::identity(),
                        gravity,
                    },
                    _ => return Err(invalid("system.rigid_body", "give either `circle` or both `omega` and `accel`")),
                };
                spec.gravity = gravity;
                spec.initial.r = exp(&v3(&r.rotation0));
                if let Some(v) = r.velocity0 {
                    spec.initial.v = v3(&v);
                }
                spec.initial.p = v3(&r.position0);
                if r.landmarks.len() < 3 {
                    return Err(invalid("system.rigid_body.landmarks", "need at least three landmarks"));
                }
                let landmarks: Vec<_> = r.landmarks.iter().map(v3).collect();
                let bias = ImuBias { gyro: v3(&r.bias_gyro), accel: v3(&r.bias_accel) };
                let nz = &self.noise;
                for (f, v) in [("gyro_variance", nz.gyro_variance), ("accel_variance", nz.accel_variance), ("landmark_variance", nz.landmark_variance)] {
                    if !(v >= 0.0) || !v.is_finite() {
                        return Err(invalid(&format!("noise.{f}"), "must be a non-negative number"));
                    }
                }
                let noise = Noise {
                    sigma_u: DMatrix::zeros(0, 0),
                    sigma_y: DMatrix::zeros(0, 0),
                    gyro: Matrix3::identity() * nz.gyro_variance,
                    accel: Matrix3::identity() * nz.accel_variance,
                    landmark: Matrix3::identity() * nz.landmark_variance,
                    seed: nz.seed.unwrap_or(0),
                };
                (System::RigidBody { spec, landmarks, bias }, noise)
            }
            _ => return Err(invalid("system", "give exactly one of [system.ltv] or [system.rigid_body]")),
        };
        if !noise.is_zero() && self.noise.seed.is_none() {
            return Err(invalid("noise.seed", "required when any noise level is nonzero"));
        }
        for name in self.estimator.run.iter().flatten() {
            let e = crate::estimate::Estimator::parse(name)?;
            if e.is_manifold() != matches!(system, System::RigidBody { .. }) {
                return Err(invalid("estimator.run", format!("`{name}` does not apply to this system")));
            }
        }
        Ok(Scenario {
            name: self.name,
            grid,
            system,
            noise,
            estimator: self.estimator,
            output_dir: self.output.dir.map(PathBuf::from),
            trials: self.montecarlo.trials,
        })
    }

    fn check_estimator_dims(&self, n: usize, p: usize) -> Result<(), CliError> {
        let e = &self.estimator;
        for (f, v) in [("estimator.xi0", &e.xi0), ("estimator.x0_guess", &e.x0_guess)] {
            if let Some(v) = v {
                if v.len() != n {
                    return Err(invalid(f, format!("must have length {n}")));
                }
            }
        }
        square("estimator.p0", &e.p0, n)?;
        square("estimator.q", &e.q, n)?;
        square("estimator.r", &e.r, p)?;
        Ok(())
    }
}

/// Loads a scenario from a path, or a bundled one by name.
pub fn load(arg: &str) -> Result<Scenario, CliError> {
    let path = Path::new(arg);
    let text = if path.exists() {
        std::fs::read_to_string(path).map_err(|e| CliError::Validation(format!("{arg}: {e}")))?
    } else if let Some((_, t)) = BUNDLED.iter().find(|(n, _)| *n == arg) {
        t.to_string()
    } else {
        let names: Vec<_> = BUNDLED.iter().map(|(n, _)| *n).collect();
        return Err(CliError::Validation(format!(
            "{arg}: no such file or bundled scenario (bundled: {})",
            names.join(", ")
        )));
    };
    ScenarioFile::parse(&text)?.validate()
}
