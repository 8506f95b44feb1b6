//! Small dense linear-algebra helpers shared by the estimators.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

/// Singular values below this fraction of the largest are treated as zero.
pub const RANK_TOL: f64 = 1e-10;

/// What to do when a least-squares problem has a nontrivial nullspace.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum RankPolicy {
    /// Fail with [`Error::RankDeficient`].
    #[default]
    Strict,
    /// Return the minimum-norm minimizer.
    MinNorm,
}

#[derive(Debug, Clone)]
pub struct LstsqSolution {
    pub x: DVector<f64>,
    pub rank: usize,
    pub nullspace: usize,
    /// `|A x - b|^2` at the solution.
    pub residual_sq: f64,
}

/// Solves `min |A x - b|^2` through the SVD of `A`.
pub fn lstsq(a: &DMatrix<f64>, b: &DVector<f64>, policy: RankPolicy) -> Result<LstsqSolution> {
    if a.nrows() != b.len() {
        return Err(Error::Shape(format!("lstsq: {} rows vs rhs of length {}", a.nrows(), b.len())));
    }
    let n = a.ncols();
    if a.nrows() == 0 || n == 0 {
        return Err(Error::RankDeficient { nullspace: n });
    }
    let svd = a.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let cutoff = RANK_TOL * smax;
    let rank = svd.singular_values.iter().filter(|&&s| s > cutoff && s > 0.0).count();
    let nullspace = n - rank;
    if nullspace > 0 && policy == RankPolicy::Strict {
        return Err(Error::RankDeficient { nullspace });
    }
    let u = svd.u.as_ref().expect("u requested");
    let v_t = svd.v_t.as_ref().expect("v_t requested");
    let mut x = DVector::<f64>::zeros(n);
    for (i, &s) in svd.singular_values.iter().enumerate() {
        if s > cutoff && s > 0.0 {
            let coeff = u.column(i).dot(b) / s;
            x += v_t.row(i).transpose() * coeff;
        }
    }
    let residual_sq = (a * &x - b).norm_squared();
    Ok(LstsqSolution { x, rank, nullspace, residual_sq })
}

/// Reciprocal 2-norm condition number `sigma_min / sigma_max`.
pub fn rcond(m: &DMatrix<f64>) -> f64 {
    let s = m.singular_values();
    let max = s.max();
    if max == 0.0 {
        0.0
    } else {
        s.min() / max
    }
}

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    SymmetricEigen::new(symmetrize(m)).eigenvalues.min()
}

/// Checks symmetry and positive semidefiniteness with a relative slack.
pub fn check_psd(m: &DMatrix<f64>, name: &str) -> Result<()> {
    if !m.is_square() {
        return Err(Error::InvalidCovariance(format!("{name} is not square")));
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidCovariance(format!("{name} has non-finite entries")));
    }
    let scale = m.norm().max(1.0);
    if (m - m.transpose()).norm() > 1e-10 * scale {
        return Err(Error::InvalidCovariance(format!("{name} is not symmetric")));
    }
    if m.nrows() > 0 && min_eigenvalue(m) < -1e-12 * scale {
        return Err(Error::InvalidCovariance(format!("{name} is not positive semidefinite")));
    }
    Ok(())
}

/// Symmetric square root `S` with `S S = M` for a PSD matrix.
pub fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(symmetrize(m));
    let d = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&d) * eig.eigenvectors.transpose()
}

/// Whitening matrix `L = Sigma^{-1/2}`, so that `|r|^2_{Sigma^{-1}} = |L r|^2`.
pub fn whitening(sigma: &DMatrix<f64>, name: &str) -> Result<DMatrix<f64>> {
    check_psd(sigma, name)?;
    let eig = SymmetricEigen::new(symmetrize(sigma));
    let max = eig.eigenvalues.max();
    if eig.eigenvalues.iter().any(|&l| l <= 1e-300 || l <= 1e-15 * max) {
        return Err(Error::InvalidCovariance(format!("{name} is not positive definite")));
    }
    let d = eig.eigenvalues.map(|l| 1.0 / l.sqrt());
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&d) * eig.eigenvectors.transpose())
}

/// `|a - b|_F / max(|b|_F, floor)`.
pub fn rel_diff(a: &DMatrix<f64>, b: &DMatrix<f64>, floor: f64) -> f64 {
    (a - b).norm() / b.norm().max(floor)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lstsq_full_rank() {
        let a = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
        let b = DVector::from_vec(vec![1.0, 2.0, 3.0]);
        let sol = lstsq(&a, &b, RankPolicy::Strict).unwrap();
        assert!((sol.x[0] - 1.0).abs() < 1e-12 && (sol.x[1] - 2.0).abs() < 1e-12);
        assert_eq!(sol.rank, 2);
    }

    #[test]
    fn lstsq_rank_deficient() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 2.0, 2.0]);
        let b = DVector::from_vec(vec![1.0, 2.0]);
        assert_eq!(lstsq(&a, &b, RankPolicy::Strict).unwrap_err(), Error::RankDeficient { nullspace: 1 });
        let sol = lstsq(&a, &b, RankPolicy::MinNorm).unwrap();
        assert!((sol.x[0] - 0.5).abs() < 1e-12 && (sol.x[1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn psd_checks() {
        assert!(check_psd(&DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0]), "s").is_ok());
        assert!(check_psd(&DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]), "s").is_err());
        assert!(check_psd(&DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0]), "s").is_err());
        let m = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let s = psd_sqrt(&m);
        assert!((&s * &s - &m).norm() < 1e-12);
        let w = whitening(&m, "m").unwrap();
        assert!((&w * &m * &w - DMatrix::identity(2, 2)).norm() < 1e-12);
    }
}
