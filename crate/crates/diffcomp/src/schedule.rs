//! Variance-preserving noise schedule.
//!
//! Discrete VP schedule over train-time indices `0..=N`: `alpha_bar[0] = 1`
//! (clean data) and `alpha_bar[i] = prod_{j<=i} (1 - beta_j)` with linearly
//! spaced betas. At every index the signal/noise coefficients satisfy
//! `signal^2 + noise^2 = 1`.
//!
//! Before forming any ratio (signal ratios, log-SNR), `alpha_bar` is clamped
//! to `[1e-6, 1 - 1e-6]` so the endpoints stay finite.

use crate::error::{Error, Result};

/// Clamp bounds applied to `alpha_bar` before ratios.
pub const ALPHA_BAR_CLAMP: (f64, f64) = (1e-6, 1.0 - 1e-6);

/// Discrete variance-preserving schedule.
#[derive(Debug, Clone)]
pub struct NoiseSchedule {
    alpha_bar: Vec<f64>,
    num_train_steps: usize,
}

impl NoiseSchedule {
    /// Builds a VP schedule from linearly spaced betas over `(beta_min, beta_max)`.
    pub fn vp_linear(num_train_steps: usize, beta_range: (f64, f64)) -> Result<Self> {
        let (beta_min, beta_max) = beta_range;
        if num_train_steps == 0 {
            return Err(Error::config("num_train_steps must be positive"));
        }
        if !(beta_min > 0.0 && beta_min < beta_max && beta_max < 1.0) {
            return Err(Error::config(format!(
                "beta range must satisfy 0 < beta_min < beta_max < 1, got ({beta_min}, {beta_max})"
            )));
        }
        let mut alpha_bar = Vec::with_capacity(num_train_steps + 1);
        alpha_bar.push(1.0);
        let mut acc = 1.0;
        for j in 0..num_train_steps {
            let frac = if num_train_steps == 1 {
                0.0
            } else {
                j as f64 / (num_train_steps - 1) as f64
            };
            let beta = beta_min + frac * (beta_max - beta_min);
            acc *= 1.0 - beta;
            alpha_bar.push(acc);
        }
        Ok(NoiseSchedule {
            alpha_bar,
            num_train_steps,
        })
    }

    pub fn num_train_steps(&self) -> usize {
        self.num_train_steps
    }

    /// Raw (unclamped) `alpha_bar` at a train index.
    pub fn alpha_bar(&self, index: usize) -> f64 {
        self.alpha_bar[index]
    }

    fn clamped(&self, index: usize) -> f64 {
        self.alpha_bar[index].clamp(ALPHA_BAR_CLAMP.0, ALPHA_BAR_CLAMP.1)
    }

    /// Signal coefficient `sqrt(alpha_bar)` (clamped).
    pub fn signal(&self, index: usize) -> f64 {
        self.clamped(index).sqrt()
    }

    /// Noise coefficient `sqrt(1 - alpha_bar)` (clamped).
    pub fn noise(&self, index: usize) -> f64 {
        (1.0 - self.clamped(index)).sqrt()
    }

    /// Log signal-to-noise ratio `ln(signal / noise)`.
    pub fn log_snr(&self, index: usize) -> f64 {
        (self.signal(index) / self.noise(index)).ln()
    }
}

/// Sampling grid: `num_steps + 1` strictly increasing train indices from
/// `0` to `num_train_steps`, uniformly spaced in the discrete index.
#[derive(Debug, Clone)]
pub struct TimeGrid {
    indices: Vec<usize>,
}

impl TimeGrid {
    pub fn uniform(num_train_steps: usize, num_steps: usize) -> Result<Self> {
        if num_steps == 0 {
            return Err(Error::config("num_steps must be positive"));
        }
        if num_steps > num_train_steps {
            return Err(Error::config(format!(
                "num_steps ({num_steps}) must not exceed num_train_steps ({num_train_steps})"
            )));
        }
        let indices = (0..=num_steps)
            .map(|k| ((k * num_train_steps) as f64 / num_steps as f64).round() as usize)
            .collect();
        Ok(TimeGrid { indices })
    }

    /// Number of integration steps (grid length minus one).
    pub fn num_steps(&self) -> usize {
        self.indices.len() - 1
    }

    /// Train index at grid point `k` (`k` in `0..=num_steps`).
    pub fn train_index(&self, k: usize) -> usize {
        self.indices[k]
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_betas_monotone_decreasing() {
        let sched = NoiseSchedule::vp_linear(1000, (1e-4, 0.02)).unwrap();
        assert!(sched.alpha_bar(0) >= 0.99);
        for i in 1..=1000 {
            assert!(sched.alpha_bar(i) < sched.alpha_bar(i - 1));
            assert!(sched.alpha_bar(i) > 0.0 && sched.alpha_bar(i) <= 1.0);
        }
    }

    #[test]
    fn single_step_schedule() {
        let sched = NoiseSchedule::vp_linear(1, (1e-4, 0.02)).unwrap();
        assert_eq!(sched.alpha_bar.len(), 2);
        assert!((sched.alpha_bar(1) - (1.0 - 1e-4)).abs() < 1e-15);
    }

    #[test]
    fn vp_identity_at_all_indices() {
        let sched = NoiseSchedule::vp_linear(1000, (1e-4, 0.02)).unwrap();
        for i in 0..=1000 {
            let s = sched.signal(i);
            let n = sched.noise(i);
            assert!((s * s + n * n - 1.0).abs() <= 1e-12, "index {i}");
        }
    }

    #[test]
    fn rejects_bad_beta_range() {
        assert!(NoiseSchedule::vp_linear(10, (0.02, 1e-4)).is_err());
        assert!(NoiseSchedule::vp_linear(10, (0.0, 0.02)).is_err());
        assert!(NoiseSchedule::vp_linear(10, (1e-4, 1.0)).is_err());
    }

    #[test]
    fn uniform_grid_endpoints_and_monotone() {
        let grid = TimeGrid::uniform(1000, 20).unwrap();
        assert_eq!(grid.num_steps(), 20);
        assert_eq!(grid.train_index(0), 0);
        assert_eq!(grid.train_index(20), 1000);
        for k in 1..=20 {
            assert!(grid.train_index(k) > grid.train_index(k - 1));
        }
    }

    #[test]
    fn grid_rejects_more_steps_than_train_indices() {
        assert!(TimeGrid::uniform(10, 11).is_err());
        assert!(TimeGrid::uniform(10, 10).is_ok());
    }
}
