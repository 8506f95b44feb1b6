//! SO(3) primitives: hat operator, Rodrigues exponential, logarithm and
//! projection onto the group.

use std::ops::Mul;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Below this angle the exponential and logarithm use Taylor expansions.
pub const SMALL_ANGLE: f64 = 1e-6;

/// Tolerance of the orthogonality and determinant invariants.
pub const ROTATION_TOL: f64 = 1e-9;

/// `hat(w) b = w x b`.
pub fn hat(w: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -w.z, w.y, w.z, 0.0, -w.x, -w.y, w.x, 0.0)
}

/// Inverse of [`hat`] on the skew part of `m`.
pub fn vee(m: &Matrix3<f64>) -> Vector3<f64> {
    Vector3::new(m[(2, 1)] - m[(1, 2)], m[(0, 2)] - m[(2, 0)], m[(1, 0)] - m[(0, 1)]) * 0.5
}

/// Rotation matrix. Construction through [`Rotation::new`] checks
/// `R^T R = I` and `det R = 1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Rotation(Matrix3<f64>);

impl Rotation {
    pub fn identity() -> Self {
        Self(Matrix3::identity())
    }

    pub fn new(m: Matrix3<f64>) -> Result<Self> {
        if !is_rotation(&m, ROTATION_TOL) {
            return Err(Error::InvalidInput("matrix is not a rotation".into()));
        }
        Ok(Self(m))
    }

    /// Wraps a matrix the caller knows to be orthonormal (up to roundoff).
    pub fn from_matrix_unchecked(m: Matrix3<f64>) -> Self {
        Self(m)
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }

    pub fn into_inner(self) -> Matrix3<f64> {
        self.0
    }

    pub fn transpose(&self) -> Self {
        Self(self.0.transpose())
    }

    pub fn inverse(&self) -> Self {
        self.transpose()
    }

    pub fn exp(w: &Vector3<f64>) -> Self {
        exp(w)
    }

    pub fn log(&self) -> Result<Vector3<f64>> {
        log(self)
    }

    pub fn rotate(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.0 * v
    }

    /// Geodesic distance `|log(self^T other)|`.
    pub fn angle_to(&self, other: &Rotation) -> f64 {
        let rel = self.transpose() * *other;
        let c = ((rel.0.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
        let s = vee(&rel.0).norm();
        s.atan2(c)
    }

    /// Re-orthonormalizes. Rotations are never degenerate, so this cannot fail.
    pub fn renormalized(&self) -> Self {
        project(&self.0).unwrap_or(*self)
    }

    /// Row-major entries.
    pub fn row_major(&self) -> [f64; 9] {
        let m = &self.0;
        [m[(0, 0)], m[(0, 1)], m[(0, 2)], m[(1, 0)], m[(1, 1)], m[(1, 2)], m[(2, 0)], m[(2, 1)], m[(2, 2)]]
    }
}

impl Mul for Rotation {
    type Output = Rotation;
    fn mul(self, rhs: Rotation) -> Rotation {
        Rotation(self.0 * rhs.0)
    }
}

impl Mul<Vector3<f64>> for Rotation {
    type Output = Vector3<f64>;
    fn mul(self, rhs: Vector3<f64>) -> Vector3<f64> {
        self.0 * rhs
    }
}

pub fn is_rotation(m: &Matrix3<f64>, tol: f64) -> bool {
    m.iter().all(|v| v.is_finite())
        && (m.transpose() * m - Matrix3::identity()).norm() <= tol
        && (m.determinant() - 1.0).abs() <= tol
}

/// Rodrigues formula.
pub fn exp(w: &Vector3<f64>) -> Rotation {
    let theta2 = w.norm_squared();
    let theta = theta2.sqrt();
    let k = hat(w);
    let (a, b) = if theta < SMALL_ANGLE {
        (1.0 - theta2 / 6.0 + theta2 * theta2 / 120.0, 0.5 - theta2 / 24.0 + theta2 * theta2 / 720.0)
    } else {
        (theta.sin() / theta, (1.0 - theta.cos()) / theta2)
    };
    Rotation(Matrix3::identity() + k * a + k * k * b)
}

/// Principal logarithm, `|log R| < pi`. Fails when the angle is within
/// about `1e-9` of `pi` in trace.
pub fn log(r: &Rotation) -> Result<Vector3<f64>> {
    let m = &r.0;
    let tr = m.trace();
    if tr <= -1.0 + 1e-9 {
        let angle = ((tr - 1.0) * 0.5).clamp(-1.0, 1.0).acos();
        return Err(Error::AngleNearPi { angle });
    }
    let c = ((tr - 1.0) * 0.5).clamp(-1.0, 1.0);
    let axis_sin = vee(m);
    let s = axis_sin.norm();
    let theta = s.atan2(c);
    if theta < SMALL_ANGLE {
        let t2 = theta * theta;
        return Ok(axis_sin * (1.0 + t2 / 6.0 + 7.0 * t2 * t2 / 360.0));
    }
    if theta < std::f64::consts::PI - 1e-3 {
        return Ok(axis_sin * (theta / s));
    }
    // Near pi the skew part vanishes; read the axis from the symmetric part.
    let sym = (m + m.transpose()) * 0.5 - Matrix3::identity() * c;
    let (mut best, mut best_val) = (0, sym[(0, 0)]);
    for i in 1..3 {
        if sym[(i, i)] > best_val {
            best = i;
            best_val = sym[(i, i)];
        }
    }
    let mut axis: Vector3<f64> = sym.column(best).into_owned() / best_val.max(1e-300).sqrt();
    axis.normalize_mut();
    if axis.dot(&axis_sin) < 0.0 {
        axis = -axis;
    }
    Ok(axis * theta)
}

/// Nearest rotation in Frobenius norm (orthogonal polar factor).
pub fn project(m: &Matrix3<f64>) -> Result<Rotation> {
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::ProjectionFailed("non-finite entries".into()));
    }
    let det = m.determinant();
    if !(det > 0.0) {
        return Err(Error::ProjectionFailed(format!("determinant {det} is not positive")));
    }
    let svd = m.svd(true, true);
    let smax = svd.singular_values.max();
    if svd.singular_values.min() <= 1e-12 * smax {
        return Err(Error::ProjectionFailed("matrix is numerically singular".into()));
    }
    let u = svd.u.expect("u requested");
    let v_t = svd.v_t.expect("v_t requested");
    let r = u * v_t;
    Ok(Rotation(r))
}

/// Rotation `R` minimizing `sum_i |R a_i - b_i|^2` given the correlation
/// `H = sum_i b_i a_i^T` (Kabsch with determinant correction).
pub fn procrustes(h: &Matrix3<f64>) -> Result<Rotation> {
    let svd = h.svd(true, true);
    let u = svd.u.ok_or_else(|| Error::ProjectionFailed("svd failed".into()))?;
    let v_t = svd.v_t.ok_or_else(|| Error::ProjectionFailed("svd failed".into()))?;
    let d = (u * v_t).determinant().signum();
    let fix = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d));
    Ok(Rotation(u * fix * v_t))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::{FRAC_PI_2, PI};

    #[test]
    fn hat_definition() {
        assert_eq!(hat(&Vector3::zeros()), Matrix3::zeros());
        let h = hat(&Vector3::new(1.0, 0.0, 0.0));
        assert_eq!(h, Matrix3::new(0.0, 0.0, 0.0, 0.0, 0.0, -1.0, 0.0, 1.0, 0.0));
    }

    #[test]
    fn exp_quarter_turn_about_x() {
        let r = exp(&Vector3::new(FRAC_PI_2, 0.0, 0.0));
        let y = r * Vector3::new(0.0, 1.0, 0.0);
        assert!((y - Vector3::new(0.0, 0.0, 1.0)).norm() < 1e-12);
        assert_eq!(exp(&Vector3::zeros()).0, Matrix3::identity());
    }

    #[test]
    fn exp_small_angle_matches_taylor() {
        let w = Vector3::new(3.0, -4.0, 12.0).normalize() * 1e-10;
        let k = hat(&w);
        let taylor = Matrix3::identity() + k + k * k / 2.0 + k * k * k / 6.0 + k * k * k * k / 24.0;
        assert!((exp(&w).0 - taylor).norm() < 1e-15);
    }

    #[test]
    fn log_identity_and_small_angle() {
        assert_eq!(log(&Rotation::identity()).unwrap(), Vector3::zeros());
        let w = Vector3::new(0.6, 0.0, -0.8) * 1e-8;
        // Build the matrix from the series directly so the check does not reuse exp().
        let k = hat(&w);
        let m = Matrix3::identity() + k + k * k / 2.0;
        let got = log(&Rotation(m)).unwrap();
        assert!((got - w).norm() / w.norm() < 1e-6);
    }

    #[test]
    fn log_rejects_half_turn() {
        let r = exp(&Vector3::new(0.0, PI, 0.0));
        assert!(matches!(log(&r), Err(Error::AngleNearPi { .. })));
    }

    #[test]
    fn log_close_to_pi_uses_symmetric_branch() {
        let w = Vector3::new(1.0, 2.0, -2.0).normalize() * (PI - 5e-4);
        let got = log(&exp(&w)).unwrap();
        assert!((got - w).norm() < 1e-9, "{}", (got - w).norm());
    }

    #[test]
    fn projection_cases() {
        let r = exp(&Vector3::new(0.3, -0.2, 1.1));
        assert!((project(&r.0).unwrap().0 - r.0).norm() < 1e-14);
        assert!((project(&(r.0 * 1.5)).unwrap().0 - r.0).norm() < 1e-12);
        let perturbed = r.0 + Matrix3::new(1.0, -2.0, 0.5, 0.3, 0.7, -1.0, 2.0, 0.1, 0.4) * 1e-6;
        let p = project(&perturbed).unwrap();
        assert!(is_rotation(&p.0, ROTATION_TOL));
        assert!((p.0 - r.0).norm() < 1e-5);
        assert!(project(&Matrix3::zeros()).is_err());
        assert!(project(&(-Matrix3::identity())).is_err());
    }

    #[test]
    fn procrustes_recovers_rotation() {
        let r = exp(&Vector3::new(-0.4, 0.9, 0.2));
        let pts = [Vector3::new(1.0, 0.0, 0.0), Vector3::new(0.0, 2.0, 0.0), Vector3::new(0.5, 0.5, 0.0)];
        let h = pts.iter().fold(Matrix3::zeros(), |acc, a| acc + (r * *a) * a.transpose());
        assert!((procrustes(&h).unwrap().0 - r.0).norm() < 1e-12);
    }

    proptest! {
        #[test]
        fn hat_is_cross_product(w in prop::array::uniform3(-10.0..10.0f64), b in prop::array::uniform3(-10.0..10.0f64)) {
            let (w, b) = (Vector3::from(w), Vector3::from(b));
            prop_assert!((hat(&w) * b - w.cross(&b)).norm() <= 1e-15 * (1.0 + w.norm() * b.norm()) * 4.0);
            prop_assert_eq!(hat(&w).transpose(), -hat(&w));
        }

        #[test]
        fn exp_log_roundtrip(dir in prop::array::uniform3(-1.0..1.0f64), angle in 0.0..(PI - 0.01)) {
            let d = Vector3::from(dir);
            prop_assume!(d.norm() > 1e-3);
            let w = d.normalize() * angle;
            let r = exp(&w);
            prop_assert!(is_rotation(&r.0, ROTATION_TOL));
            let back = log(&r).unwrap();
            prop_assert!((back - w).norm() < 1e-9);
            prop_assert!((exp(&back).0 - r.0).norm() < 1e-9);
        }
    }
}
