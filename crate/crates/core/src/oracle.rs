//! Independent reference computations used to cross-check the estimators.
//!
//! Nothing here goes through the Runge–Kutta integrator or the estimator
//! code paths.

use nalgebra::{DMatrix, DVector};

/// Matrix exponential by scaling and squaring with a truncated Taylor series.
pub fn expm(a: &DMatrix<f64>) -> DMatrix<f64> {
    assert!(a.is_square());
    let n = a.nrows();
    let norm = a.iter().map(|v| v.abs()).fold(0.0, f64::max) * n as f64;
    let mut squarings = 0u32;
    let mut scale = 1.0;
    while norm * scale > 0.25 {
        scale *= 0.5;
        squarings += 1;
    }
    let x = a * scale;
    let mut term = DMatrix::<f64>::identity(n, n);
    let mut sum = term.clone();
    for k in 1..=24 {
        term = &term * &x / k as f64;
        sum += &term;
    }
    for _ in 0..squarings {
        sum = &sum * &sum;
    }
    sum
}

/// `(int_0^t expm(A s) ds) * b`, read off the exponential of the augmented
/// matrix `[[A, b], [0, 0]]`.
pub fn integrated_expm_times(a: &DMatrix<f64>, b: &DVector<f64>, t: f64) -> DVector<f64> {
    let n = a.nrows();
    let mut aug = DMatrix::<f64>::zeros(n + 1, n + 1);
    aug.view_mut((0, 0), (n, n)).copy_from(a);
    aug.view_mut((0, n), (n, 1)).copy_from(b);
    let e = expm(&(aug * t));
    e.view((0, n), (n, 1)).column(0).into_owned()
}

/// Observability Gramian of a window by explicitly stacking the
/// observability matrix `[C_k; C_{k+1} Psi(k+1,k); ...]` and forming `O^T O`.
pub fn stacked_observability_gramian(
    transitions: &[DMatrix<f64>],
    outputs: &[DMatrix<f64>],
    start: usize,
    window: usize,
) -> DMatrix<f64> {
    let n = transitions[0].nrows();
    let p = outputs[start].nrows();
    let rows = p * (window + 1);
    let mut stacked = DMatrix::<f64>::zeros(rows, n);
    for (j, i) in (start..=start + window).enumerate() {
        let mut psi = DMatrix::<f64>::identity(n, n);
        for f in &transitions[start..i] {
            psi = f * psi;
        }
        let block = &outputs[i] * psi;
        stacked.view_mut((j * p, 0), (p, n)).copy_from(&block);
    }
    stacked.transpose() * stacked
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn expm_of_rotation_generator() {
        let a = DMatrix::from_row_slice(2, 2, &[0.0, -1.0, 1.0, 0.0]);
        let e = expm(&(a * std::f64::consts::FRAC_PI_2));
        let expected = DMatrix::from_row_slice(2, 2, &[0.0, -1.0, 1.0, 0.0]);
        assert!((e - expected).norm() < 1e-14);
    }

    #[test]
    fn expm_scalar() {
        let e = expm(&DMatrix::from_element(1, 1, 3.0));
        assert!((e[(0, 0)] - 3f64.exp()).abs() < 1e-12 * 3f64.exp());
    }

    #[test]
    fn integrated_expm_scalar() {
        // int_0^t e^{as} ds * b = b (e^{at} - 1) / a
        let v = integrated_expm_times(&DMatrix::from_element(1, 1, 0.7), &DVector::from_element(1, 2.0), 1.5);
        let exact = 2.0 * ((0.7f64 * 1.5).exp() - 1.0) / 0.7;
        assert!((v[0] - exact).abs() < 1e-12);
    }
}
