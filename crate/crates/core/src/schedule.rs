//! Diffusion-time coefficients: per-step noise levels and the posterior mean
//! weights used by the reverse process.
//!
//! Steps are 1-based, `t` in `1..=T`. The cumulative signal retention is kept
//! as an extended array with an explicit sentinel at index 0, so that the
//! step-zero value is exactly 1 rather than an implicit branch.

use alloc::vec::Vec;

use crate::error::{Error, Result};

/// Per-step noise schedule for a `T`-step diffusion process.
///
/// Invariants, enforced at construction:
/// - `0 < beta[t] < 1` for all `t`,
/// - `alpha[t] = 1 - beta[t]`,
/// - `alpha_bar` strictly decreasing with `alpha_bar(t) = alpha_bar(t-1) * alpha(t)`
///   exactly, and `alpha_bar(0) == 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    beta: Vec<f64>,
    alpha: Vec<f64>,
    /// Extended sequence: `alpha_bar_ext[t]` is the cumulative product up to
    /// step `t`, with the sentinel `alpha_bar_ext[0] == 1.0`.
    alpha_bar_ext: Vec<f64>,
}

impl NoiseSchedule {
    /// Builds a schedule with `beta` interpolated linearly from `beta_start`
    /// (t = 1) to `beta_end` (t = T).
    pub fn linear(t_steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if t_steps == 0 {
            return Err(Error::InvalidArgument("schedule needs at least one step"));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::InvalidArgument(
                "beta bounds must satisfy 0 < beta_start <= beta_end < 1",
            ));
        }
        let beta: Vec<f64> = (0..t_steps)
            .map(|i| {
                if t_steps == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (t_steps - 1) as f64
                }
            })
            .collect();
        Self::from_betas(beta)
    }

    /// Builds a schedule from explicit per-step beta values.
    pub fn from_betas(beta: Vec<f64>) -> Result<Self> {
        if beta.is_empty() {
            return Err(Error::InvalidArgument("schedule needs at least one step"));
        }
        if beta.iter().any(|&b| !(b > 0.0 && b < 1.0)) {
            return Err(Error::InvalidArgument("every beta must lie in (0, 1)"));
        }
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bar_ext = Vec::with_capacity(beta.len() + 1);
        alpha_bar_ext.push(1.0);
        let mut prod = 1.0;
        for &a in &alpha {
            prod *= a;
            alpha_bar_ext.push(prod);
        }
        Ok(NoiseSchedule { beta, alpha, alpha_bar_ext })
    }

    /// Reconstructs a schedule from serialized arrays, revalidating the
    /// multiplicative invariants exactly.
    pub fn from_arrays(beta: Vec<f64>, alpha: Vec<f64>, alpha_bar_ext: Vec<f64>) -> Result<Self> {
        let rebuilt = Self::from_betas(beta)?;
        if rebuilt.alpha != alpha || rebuilt.alpha_bar_ext != alpha_bar_ext {
            return Err(Error::InvalidArgument(
                "schedule arrays are inconsistent with their betas",
            ));
        }
        Ok(rebuilt)
    }

    pub fn t_steps(&self) -> usize {
        self.beta.len()
    }

    /// `beta_t` for `t` in `1..=T`.
    pub fn beta(&self, t: usize) -> f64 {
        self.check_step(t);
        self.beta[t - 1]
    }

    /// `alpha_t = 1 - beta_t` for `t` in `1..=T`.
    pub fn alpha(&self, t: usize) -> f64 {
        self.check_step(t);
        self.alpha[t - 1]
    }

    /// Cumulative product of alphas up to step `t`, for `t` in `0..=T`.
    /// `alpha_bar(0)` is the sentinel and equals exactly 1.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        assert!(t <= self.t_steps(), "alpha_bar index {t} > T");
        self.alpha_bar_ext[t]
    }

    pub fn betas(&self) -> &[f64] {
        &self.beta
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alpha
    }

    /// The extended cumulative array including the index-0 sentinel.
    pub fn alpha_bars_ext(&self) -> &[f64] {
        &self.alpha_bar_ext
    }

    /// Weights of the step-`t` posterior mean: the clean-sample estimate gets
    /// `sqrt(alpha_bar(t-1)) * beta_t / (1 - alpha_bar(t))` and the current
    /// noisy sample gets `sqrt(alpha_t) * (1 - alpha_bar(t-1)) / (1 - alpha_bar(t))`.
    ///
    /// At `t = 1` the posterior collapses onto the clean estimate: the weights
    /// are exactly `(1, 0)` because `alpha_bar(0) == 1`.
    pub fn posterior_mean_coeffs(&self, t: usize) -> Result<(f64, f64)> {
        if t < 1 || t > self.t_steps() {
            return Err(Error::StepOutOfRange { t, t_steps: self.t_steps() });
        }
        if t == 1 {
            return Ok((1.0, 0.0));
        }
        #[allow(unused_imports)]
        use crate::math::F64Ext as _;
        let ab_prev = self.alpha_bar(t - 1);
        let ab = self.alpha_bar(t);
        let coef_clean = ab_prev.sqrt() * self.beta(t) / (1.0 - ab);
        let coef_noisy = self.alpha(t).sqrt() * (1.0 - ab_prev) / (1.0 - ab);
        Ok((coef_clean, coef_noisy))
    }

    fn check_step(&self, t: usize) {
        assert!(
            t >= 1 && t <= self.t_steps(),
            "step index {t} outside 1..={}",
            self.t_steps()
        );
    }
}
