//! Uniform fine time grid with keyframe instants lying on grid points.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Relative slack used when deciding whether a time lies on the grid.
const ON_GRID_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    t0: f64,
    dt: f64,
    n_steps: usize,
    keyframes: Vec<usize>,
}

impl TimeGrid {
    pub fn new(t0: f64, dt: f64, n_steps: usize, keyframes: Vec<usize>) -> Result<Self> {
        if !(dt > 0.0) || !dt.is_finite() {
            return Err(Error::InvalidGrid(format!("dt must be positive, got {dt}")));
        }
        if !t0.is_finite() {
            return Err(Error::InvalidGrid("t0 must be finite".into()));
        }
        for w in keyframes.windows(2) {
            if w[1] <= w[0] {
                return Err(Error::InvalidGrid(format!(
                    "keyframe indices must be strictly increasing ({} then {})",
                    w[0], w[1]
                )));
            }
        }
        if let Some(&last) = keyframes.last() {
            if last > n_steps {
                return Err(Error::InvalidGrid(format!(
                    "keyframe index {last} exceeds the number of steps {n_steps}"
                )));
            }
        }
        Ok(Self { t0, dt, n_steps, keyframes })
    }

    /// Keyframes every `every` fine steps, starting at index 0.
    pub fn uniform(t0: f64, dt: f64, n_steps: usize, every: usize) -> Result<Self> {
        if every == 0 {
            return Err(Error::InvalidGrid("keyframe spacing must be at least one step".into()));
        }
        Self::new(t0, dt, n_steps, (0..=n_steps).step_by(every).collect())
    }

    /// Builds a grid from explicit keyframe times. Each time must land on a
    /// grid point; the error names the first offending keyframe.
    pub fn with_keyframe_times(t0: f64, dt: f64, n_steps: usize, times: &[f64]) -> Result<Self> {
        let mut idx = Vec::with_capacity(times.len());
        for (k, &t) in times.iter().enumerate() {
            let i = Self::index_of(t0, dt, t).ok_or_else(|| {
                Error::InvalidGrid(format!("keyframe {k} at t = {t} does not lie on the grid"))
            })?;
            idx.push(i);
        }
        Self::new(t0, dt, n_steps, idx)
    }

    fn index_of(t0: f64, dt: f64, t: f64) -> Option<usize> {
        let s = (t - t0) / dt;
        let r = s.round();
        if r < 0.0 || (s - r).abs() > ON_GRID_TOL * s.abs().max(1.0) {
            None
        } else {
            Some(r as usize)
        }
    }

    pub fn t0(&self) -> f64 {
        self.t0
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    /// Number of grid points, `n_steps + 1`.
    pub fn len(&self) -> usize {
        self.n_steps + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn time(&self, i: usize) -> f64 {
        self.t0 + i as f64 * self.dt
    }

    pub fn t_end(&self) -> f64 {
        self.time(self.n_steps)
    }

    pub fn keyframes(&self) -> &[usize] {
        &self.keyframes
    }

    pub fn keyframe_times(&self) -> Vec<f64> {
        self.keyframes.iter().map(|&i| self.time(i)).collect()
    }

    /// Number of keyframe intervals.
    pub fn n_intervals(&self) -> usize {
        self.keyframes.len().saturating_sub(1)
    }

    /// Grid-index spans `[t_k, t_{k+1}]` between consecutive keyframes.
    pub fn intervals(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.keyframes.windows(2).map(|w| (w[0], w[1]))
    }

    pub fn with_keyframes(&self, keyframes: Vec<usize>) -> Result<Self> {
        Self::new(self.t0, self.dt, self.n_steps, keyframes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_keyframes() {
        let g = TimeGrid::uniform(0.0, 1e-3, 1000, 250).unwrap();
        assert_eq!(g.keyframes(), &[0, 250, 500, 750, 1000]);
        assert_eq!(g.n_intervals(), 4);
        assert!((g.t_end() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_grids() {
        assert!(TimeGrid::new(0.0, 0.0, 10, vec![0]).is_err());
        assert!(TimeGrid::new(0.0, 0.1, 10, vec![0, 5, 5]).is_err());
        assert!(TimeGrid::new(0.0, 0.1, 10, vec![0, 11]).is_err());
    }

    #[test]
    fn off_grid_keyframe_is_named() {
        let err = TimeGrid::with_keyframe_times(0.0, 1e-3, 1000, &[0.0, 0.5, 0.2505]).unwrap_err();
        match err {
            Error::InvalidGrid(msg) => assert!(msg.contains("keyframe 2"), "{msg}"),
            e => panic!("unexpected {e:?}"),
        }
        let g = TimeGrid::with_keyframe_times(0.0, 1e-3, 1000, &[0.0, 0.25, 1.0]).unwrap();
        assert_eq!(g.keyframes(), &[0, 250, 1000]);
    }
}
