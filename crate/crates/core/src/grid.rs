//! Time grids.

use std::sync::Arc;

use crate::error::{Error, Result};

/// A strictly increasing grid `0 = t_0 < ... < t_M = T`.
///
/// Cloning is cheap: the times are shared.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeGrid {
    times: Arc<[f64]>,
}

impl TimeGrid {
    /// Uniform grid with `steps` intervals on `[0, horizon]`.
    pub fn uniform(horizon: f64, steps: usize) -> Result<Self> {
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(Error::Domain(format!("horizon must be positive, got {horizon}")));
        }
        if steps == 0 {
            return Err(Error::Domain("grid needs at least one step".into()));
        }
        let dt = horizon / steps as f64;
        let mut times: Vec<f64> = (0..=steps).map(|k| k as f64 * dt).collect();
        times[steps] = horizon;
        Ok(Self { times: times.into() })
    }

    /// Grid from explicit times; must start at 0 and increase strictly.
    pub fn from_times(times: Vec<f64>) -> Result<Self> {
        if times.len() < 2 {
            return Err(Error::Domain("grid needs at least two points".into()));
        }
        if times[0] != 0.0 {
            return Err(Error::Domain("grid must start at 0".into()));
        }
        for w in times.windows(2) {
            if !(w[1] > w[0]) || !w[1].is_finite() {
                return Err(Error::Domain(format!("grid not strictly increasing at {}", w[1])));
            }
        }
        Ok(Self { times: times.into() })
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    /// Number of intervals `M`.
    pub fn steps(&self) -> usize {
        self.times.len() - 1
    }

    pub fn horizon(&self) -> f64 {
        self.times[self.times.len() - 1]
    }

    pub fn t(&self, k: usize) -> f64 {
        self.times[k]
    }

    /// Length of interval `k`, i.e. `t_{k+1} - t_k`.
    pub fn dt(&self, k: usize) -> f64 {
        self.times[k + 1] - self.times[k]
    }

    /// Index of the interval `[t_k, t_{k+1})` that contains `t` (clamped to the grid).
    pub fn interval_of(&self, t: f64) -> usize {
        let m = self.steps();
        match self.times.binary_search_by(|s| s.partial_cmp(&t).unwrap()) {
            Ok(k) => k.min(m - 1),
            Err(k) => k.saturating_sub(1).min(m - 1),
        }
    }
}
