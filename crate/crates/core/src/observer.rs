//! Hybrid sampled-data observer: continuous preintegration between keyframes
//! followed by a discrete Kalman update at each keyframe.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{check_psd, min_eigenvalue, symmetrize};
use crate::ltv::{LtvModel, MeasurementSet, SignalTrajectory};
use crate::preint::{preintegrate_segment, PreintegralSegment};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObserverState {
    pub x: DVector<f64>,
    pub p: DMatrix<f64>,
    pub k: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GramianReport {
    pub window_start: usize,
    pub gramian: DMatrix<f64>,
    pub min_eigenvalue: f64,
    pub passes: bool,
}

/// `Psi(i, k) = F_{i-1} ... F_k`, for `i = k..=k+window`.
fn window_transitions(transitions: &[DMatrix<f64>], k: usize, window: usize) -> Vec<DMatrix<f64>> {
    let n = transitions[0].nrows();
    let mut out = Vec::with_capacity(window + 1);
    let mut psi = DMatrix::<f64>::identity(n, n);
    out.push(psi.clone());
    for f in &transitions[k..k + window] {
        psi = f * psi;
        out.push(psi.clone());
    }
    out
}

fn check_window(n_transitions: usize, window: usize) -> Result<()> {
    if window < 1 {
        return Err(Error::InvalidInput("window length must be at least 1".into()));
    }
    if n_transitions == 0 {
        return Err(Error::InvalidInput("at least one transition is required".into()));
    }
    Ok(())
}

/// Observability Gramians `W_O = sum_{i=k}^{k+k1} Psi^T C_i^T C_i Psi` for
/// every window start with `k + k1 <= transitions.len()`. `outputs` holds
/// `C(t_0) .. C(t_M)` for `M` transitions.
pub fn check_uco(
    transitions: &[DMatrix<f64>],
    outputs: &[DMatrix<f64>],
    window: usize,
    delta_o: f64,
) -> Result<Vec<GramianReport>> {
    check_window(transitions.len(), window)?;
    if outputs.len() != transitions.len() + 1 {
        return Err(Error::Shape(format!("{} output matrices for {} transitions", outputs.len(), transitions.len())));
    }
    let n = transitions[0].nrows();
    let mut reports = Vec::new();
    for k in 0..(transitions.len() + 1).saturating_sub(window) {
        let psis = window_transitions(transitions, k, window);
        let mut w = DMatrix::<f64>::zeros(n, n);
        for (j, psi) in psis.iter().enumerate() {
            let cp = &outputs[k + j] * psi;
            w += cp.transpose() * cp;
        }
        let w = symmetrize(&w);
        let lmin = min_eigenvalue(&w);
        reports.push(GramianReport { window_start: k, gramian: w, min_eigenvalue: lmin, passes: lmin >= delta_o });
    }
    Ok(reports)
}

/// Reachability Gramians `W_q = sum_{i=k}^{k+k2} Psi Q Psi^T`; a window
/// passes when `lambda_min > delta_q`.
pub fn check_reachability(
    transitions: &[DMatrix<f64>],
    q: &DMatrix<f64>,
    window: usize,
    delta_q: f64,
) -> Result<Vec<GramianReport>> {
    check_window(transitions.len(), window)?;
    check_psd(q, "Q")?;
    let n = transitions[0].nrows();
    let mut reports = Vec::new();
    for k in 0..(transitions.len() + 1).saturating_sub(window) {
        let mut w = DMatrix::<f64>::zeros(n, n);
        for psi in window_transitions(transitions, k, window) {
            w += &psi * q * psi.transpose();
        }
        let w = symmetrize(&w);
        let lmin = min_eigenvalue(&w);
        reports.push(GramianReport { window_start: k, gramian: w, min_eigenvalue: lmin, passes: lmin > delta_q });
    }
    Ok(reports)
}

/// Measurement data consumed by one update.
#[derive(Debug, Clone, Copy)]
pub struct KeyframeMeasurement<'a> {
    pub y: &'a DVector<f64>,
    pub u: &'a DVector<f64>,
    pub c: &'a DMatrix<f64>,
    pub d: &'a DMatrix<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutput {
    pub state: ObserverState,
    pub innovation: DVector<f64>,
    pub gain: DMatrix<f64>,
}

/// Predict with `(F_k, v_k)`, then correct with the measurement at `t_{k+1}`.
/// The covariance update uses the Joseph form.
pub fn observer_step(
    state: &ObserverState,
    segment: &PreintegralSegment,
    meas: KeyframeMeasurement<'_>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
) -> Result<StepOutput> {
    let n = state.x.len();
    let step = state.k;
    let x_pred = segment.apply(&state.x);
    let e = meas.y - meas.c * &x_pred - meas.d * meas.u;
    let p_pred = &segment.f * &state.p * segment.f.transpose() + q;
    let s = meas.c * &p_pred * meas.c.transpose() + r;
    let s_inv = s.clone().try_inverse().ok_or_else(|| Error::StepFailed {
        step,
        reason: format!("innovation covariance is singular (min eigenvalue {:e})", min_eigenvalue(&s)),
    })?;
    let gain = &p_pred * meas.c.transpose() * s_inv;
    let x = &x_pred + &gain * &e;
    let i_kc = DMatrix::<f64>::identity(n, n) - &gain * meas.c;
    let p = symmetrize(&(&i_kc * &p_pred * i_kc.transpose() + &gain * r * gain.transpose()));
    if p.iter().any(|v| !v.is_finite()) {
        return Err(Error::StepFailed { step, reason: "non-finite covariance".into() });
    }
    Ok(StepOutput { state: ObserverState { x, p, k: step + 1 }, innovation: e, gain })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObserverLogRow {
    pub t: f64,
    pub innovation_norm: f64,
    pub error_norm: Option<f64>,
    pub trace_p: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObserverRun {
    pub states: Vec<ObserverState>,
    pub segments: Vec<PreintegralSegment>,
    pub log: Vec<ObserverLogRow>,
}

impl ObserverRun {
    pub fn final_error(&self) -> Option<f64> {
        self.log.last().and_then(|r| r.error_norm)
    }

    /// First keyframe index from which the error stays below `fraction`
    /// times the initial error.
    pub fn settling_keyframe(&self, fraction: f64) -> Option<usize> {
        let e0 = self.log.first()?.error_norm?;
        let errors: Vec<f64> = self.log.iter().map(|r| r.error_norm).collect::<Option<_>>()?;
        let thresh = fraction * e0;
        let mut settle = None;
        for (k, &e) in errors.iter().enumerate() {
            if e <= thresh {
                settle.get_or_insert(k);
            } else {
                settle = None;
            }
        }
        settle
    }
}

/// Alternates preintegration over each keyframe interval with a Kalman
/// update. When `truth` is given the log records `|x_hat - x|`.
#[allow(clippy::too_many_arguments)]
pub fn run_observer(
    model: &LtvModel,
    u: &SignalTrajectory,
    meas: &MeasurementSet,
    x0: &DVector<f64>,
    p0: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    truth: Option<&SignalTrajectory>,
) -> Result<ObserverRun> {
    check_psd(p0, "P0")?;
    check_psd(q, "Q")?;
    check_psd(r, "R")?;
    let kf = meas.grid.keyframes();
    if kf.is_empty() {
        return Err(Error::InvalidInput("no keyframes".into()));
    }
    let err = |i: usize, x: &DVector<f64>| truth.map(|tr| (x - &tr.values[i]).norm());
    let mut state = ObserverState { x: x0.clone(), p: symmetrize(p0), k: 0 };
    let mut log = vec![ObserverLogRow {
        t: meas.grid.time(kf[0]),
        innovation_norm: 0.0,
        error_norm: err(kf[0], x0),
        trace_p: state.p.trace(),
    }];
    let mut states = vec![state.clone()];
    let mut segments = Vec::with_capacity(kf.len().saturating_sub(1));
    for (k, (a, b)) in meas.grid.intervals().enumerate() {
        let seg = preintegrate_segment(model, u, k, a, b)?;
        let t = meas.grid.time(b);
        let (c, d) = (model.c(t), model.d(t));
        let out = observer_step(
            &state,
            &seg,
            KeyframeMeasurement { y: &meas.y[k + 1], u: &u.values[b], c: &c, d: &d },
            q,
            r,
        )?;
        state = out.state;
        log.push(ObserverLogRow {
            t,
            innovation_norm: out.innovation.norm(),
            error_norm: err(b, &state.x),
            trace_p: state.p.trace(),
        });
        states.push(state.clone());
        segments.push(seg);
    }
    Ok(ObserverRun { states, segments, log })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::stacked_observability_gramian;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize, scale: f64) -> DMatrix<f64> {
        DMatrix::from_fn(r, c, |_, _| rng.gen_range(-scale..scale))
    }

    #[test]
    fn uco_trivial_cases() {
        let eye = DMatrix::<f64>::identity(2, 2);
        let reports = check_uco(&[eye.clone()], &[eye.clone(), eye.clone()], 1, 1e-6).unwrap();
        assert_eq!(reports.len(), 1);
        assert!((&reports[0].gramian - &eye * 2.0).norm() < 1e-15);
        assert!((reports[0].min_eigenvalue - 2.0).abs() < 1e-14 && reports[0].passes);

        let zero = DMatrix::<f64>::zeros(1, 2);
        let reports = check_uco(&[eye.clone(), eye.clone()], &[zero.clone(), zero.clone(), zero], 1, 1e-9).unwrap();
        assert!(reports.iter().all(|r| r.gramian.norm() == 0.0 && !r.passes));
    }

    #[test]
    fn uco_matches_stacked_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let transitions: Vec<_> = (0..8).map(|_| DMatrix::<f64>::identity(3, 3) + random_matrix(&mut rng, 3, 3, 0.4)).collect();
        let outputs: Vec<_> = (0..9).map(|_| random_matrix(&mut rng, 1, 3, 1.0)).collect();
        let reports = check_uco(&transitions, &outputs, 3, 1e-6).unwrap();
        assert_eq!(reports.len(), 6);
        for rep in &reports {
            let oracle = stacked_observability_gramian(&transitions, &outputs, rep.window_start, 3);
            assert!((&rep.gramian - &oracle).norm() <= 1e-10 * oracle.norm().max(1.0));
        }
    }

    #[test]
    fn reachability_cases() {
        let eye = DMatrix::<f64>::identity(2, 2);
        let reports = check_reachability(&[eye.clone()], &eye, 1, 1e-6).unwrap();
        assert!((&reports[0].gramian - &eye * 2.0).norm() < 1e-15 && reports[0].passes);
        let reports = check_reachability(&[eye.clone()], &DMatrix::zeros(2, 2), 1, 1e-6).unwrap();
        assert!(!reports[0].passes);

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let transitions: Vec<_> = (0..6).map(|_| random_matrix(&mut rng, 2, 2, 0.6)).collect();
        let reports = check_reachability(&transitions, &eye, 2, 1e-6).unwrap();
        for rep in &reports {
            let k = rep.window_start;
            let mut direct = DMatrix::<f64>::identity(2, 2);
            let f0 = &transitions[k];
            direct += f0 * f0.transpose();
            let f1 = &transitions[k + 1] * f0;
            direct += &f1 * f1.transpose();
            assert!((&rep.gramian - direct).norm() < 1e-12);
        }
    }

    fn scalar_segment(f: f64, v: f64) -> PreintegralSegment {
        PreintegralSegment { k: 0, f: DMatrix::from_element(1, 1, f), v: DVector::from_element(1, v), t_start: 0.0, t_end: 1.0, start: 0, end: 1 }
    }

    #[test]
    fn scalar_kalman_by_hand() {
        let state = ObserverState { x: DVector::from_element(1, 0.0), p: DMatrix::from_element(1, 1, 1.0), k: 0 };
        let y = DVector::from_element(1, 1.0);
        let u = DVector::zeros(1);
        let c = DMatrix::from_element(1, 1, 1.0);
        let d = DMatrix::zeros(1, 1);
        let out = observer_step(&state, &scalar_segment(1.0, 0.0), KeyframeMeasurement { y: &y, u: &u, c: &c, d: &d }, &DMatrix::zeros(1, 1), &DMatrix::from_element(1, 1, 1.0)).unwrap();
        assert!((out.gain[(0, 0)] - 0.5).abs() < 1e-14);
        assert!((out.state.p[(0, 0)] - 0.5).abs() < 1e-14);
        assert!((out.state.x[0] - 0.5).abs() < 1e-14);
    }

    #[test]
    fn no_output_means_pure_prediction() {
        let state = ObserverState { x: DVector::from_element(1, 2.0), p: DMatrix::from_element(1, 1, 1.0), k: 0 };
        let y = DVector::from_element(1, 100.0);
        let u = DVector::zeros(1);
        let c = DMatrix::zeros(1, 1);
        let d = DMatrix::zeros(1, 1);
        let out = observer_step(&state, &scalar_segment(0.5, 1.0), KeyframeMeasurement { y: &y, u: &u, c: &c, d: &d }, &DMatrix::zeros(1, 1), &DMatrix::from_element(1, 1, 1.0)).unwrap();
        assert_eq!(out.state.x[0], 2.0);
        assert_eq!(out.gain[(0, 0)], 0.0);
    }

    #[test]
    fn singular_innovation_fails() {
        let state = ObserverState { x: DVector::zeros(1), p: DMatrix::zeros(1, 1), k: 4 };
        let y = DVector::zeros(1);
        let c = DMatrix::from_element(1, 1, 1.0);
        let d = DMatrix::zeros(1, 1);
        let err = observer_step(&state, &scalar_segment(1.0, 0.0), KeyframeMeasurement { y: &y, u: &y, c: &c, d: &d }, &DMatrix::zeros(1, 1), &DMatrix::zeros(1, 1)).unwrap_err();
        assert!(matches!(err, Error::StepFailed { step: 4, .. }));
    }
}
