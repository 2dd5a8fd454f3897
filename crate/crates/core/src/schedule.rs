//! Variance schedule of the forward noising chain and the coefficients the
//! reverse chain derives from it.
//!
//! Steps are 1-based throughout: `t = 1` is the first noising step and
//! `t = T` the last. The convention `alpha_bar_0 = 1` makes the posterior
//! variance of step 1 exactly zero, so the final reverse step is
//! deterministic.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_TIMESTEPS: usize = 1000;
/// Desk-scale step count used by the fast presets.
pub const DESK_TIMESTEPS: usize = 200;
pub const DEFAULT_BETA_START: f64 = 1e-4;
pub const DEFAULT_BETA_END: f64 = 0.02;

/// Endpoints of [`NoiseSchedule::rescaled`].
pub fn rescaled_endpoints(timesteps: usize) -> Result<(f64, f64)> {
    if timesteps == 0 {
        return Err(Error::config("schedule needs at least one step"));
    }
    let scale = DEFAULT_TIMESTEPS as f64 / timesteps as f64;
    let end = DEFAULT_BETA_END * scale;
    if end >= 1.0 {
        return Err(Error::config(format!(
            "{timesteps} steps are too few for a rescaled schedule (beta_end {end})"
        )));
    }
    Ok((DEFAULT_BETA_START * scale, end))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
    posterior_variances: Vec<f64>,
    posterior_coef_x0: Vec<f64>,
    posterior_coef_xt: Vec<f64>,
}

/// Every coefficient of one step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScheduleRow {
    pub beta: f64,
    pub alpha: f64,
    pub alpha_bar: f64,
    /// `alpha_bar` of the previous step (1 for `t = 1`).
    pub alpha_bar_prev: f64,
    pub posterior_variance: f64,
    pub posterior_coef_x0: f64,
    pub posterior_coef_xt: f64,
}

impl NoiseSchedule {
    /// Linearly interpolated betas from `beta_start` to `beta_end`.
    pub fn linear(timesteps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if timesteps == 0 {
            return Err(Error::config("schedule needs at least one step"));
        }
        if !(beta_start > 0.0) {
            return Err(Error::config(format!("beta_start {beta_start} must be positive")));
        }
        if !(beta_end < 1.0) {
            return Err(Error::config(format!("beta_end {beta_end} must be below 1")));
        }
        if beta_end < beta_start {
            return Err(Error::config(format!(
                "beta_end {beta_end} is below beta_start {beta_start}"
            )));
        }
        let betas = if timesteps == 1 {
            vec![beta_start]
        } else {
            let span = (timesteps - 1) as f64;
            (0..timesteps)
                .map(|i| {
                    if i + 1 == timesteps {
                        beta_end
                    } else {
                        beta_start + (beta_end - beta_start) * i as f64 / span
                    }
                })
                .collect()
        };
        Ok(Self::from_betas(betas))
    }

    /// The 1000-step schedule with the usual DDPM endpoints.
    pub fn standard() -> Self {
        Self::linear(DEFAULT_TIMESTEPS, DEFAULT_BETA_START, DEFAULT_BETA_END)
            .expect("default schedule is valid")
    }

    /// 200 steps, same endpoints as [`NoiseSchedule::standard`].
    pub fn desk() -> Self {
        Self::linear(DESK_TIMESTEPS, DEFAULT_BETA_START, DEFAULT_BETA_END)
            .expect("desk schedule is valid")
    }

    /// Linear schedule over `timesteps` steps with the default endpoints
    /// scaled by `1000 / timesteps`, so the final `alpha_bar` stays near zero
    /// however short the chain. Identical to [`NoiseSchedule::standard`] at
    /// 1000 steps.
    pub fn rescaled(timesteps: usize) -> Result<Self> {
        let (start, end) = rescaled_endpoints(timesteps)?;
        Self::linear(timesteps, start, end)
    }

    fn from_betas(betas: Vec<f64>) -> Self {
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(betas.len());
        let mut acc = 1.0;
        for a in &alphas {
            acc *= a;
            alpha_bars.push(acc);
        }
        let mut posterior_variances = Vec::with_capacity(betas.len());
        let mut posterior_coef_x0 = Vec::with_capacity(betas.len());
        let mut posterior_coef_xt = Vec::with_capacity(betas.len());
        for i in 0..betas.len() {
            let prev = if i == 0 { 1.0 } else { alpha_bars[i - 1] };
            let denom = 1.0 - alpha_bars[i];
            posterior_variances.push((1.0 - prev) / denom * betas[i]);
            posterior_coef_x0.push(prev.sqrt() * betas[i] / denom);
            posterior_coef_xt.push(alphas[i].sqrt() * (1.0 - prev) / denom);
        }
        Self {
            betas,
            alphas,
            alpha_bars,
            posterior_variances,
            posterior_coef_x0,
            posterior_coef_xt,
        }
    }

    pub fn timesteps(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    pub fn posterior_variances(&self) -> &[f64] {
        &self.posterior_variances
    }

    pub fn posterior_coef_x0(&self) -> &[f64] {
        &self.posterior_coef_x0
    }

    pub fn posterior_coef_xt(&self) -> &[f64] {
        &self.posterior_coef_xt
    }

    pub fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.timesteps() {
            Err(Error::StepOutOfRange {
                t,
                max: self.timesteps(),
            })
        } else {
            Ok(())
        }
    }

    pub fn lookup(&self, t: usize) -> Result<ScheduleRow> {
        self.check_step(t)?;
        let i = t - 1;
        Ok(ScheduleRow {
            beta: self.betas[i],
            alpha: self.alphas[i],
            alpha_bar: self.alpha_bars[i],
            alpha_bar_prev: if i == 0 { 1.0 } else { self.alpha_bars[i - 1] },
            posterior_variance: self.posterior_variances[i],
            posterior_coef_x0: self.posterior_coef_x0[i],
            posterior_coef_xt: self.posterior_coef_xt[i],
        })
    }

    /// `alpha_bar / (1 - alpha_bar)` at step `t`.
    pub fn snr(&self, t: usize) -> Result<f64> {
        let row = self.lookup(t)?;
        Ok(row.alpha_bar / (1.0 - row.alpha_bar))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_step_has_zero_posterior_variance() {
        let s = NoiseSchedule::linear(1, 0.1, 0.1).unwrap();
        assert_eq!(s.betas(), &[0.1]);
        assert!((s.alpha_bars()[0] - 0.9).abs() < 1e-15);
        assert_eq!(s.posterior_variances(), &[0.0]);
    }

    #[test]
    fn two_step_hand_values() {
        let s = NoiseSchedule::linear(2, 0.5, 0.5).unwrap();
        let row = s.lookup(2).unwrap();
        assert!((row.alpha_bar - 0.25).abs() < 1e-15);
        assert!((row.posterior_variance - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn rejects_bad_arguments() {
        assert!(NoiseSchedule::linear(0, 1e-4, 0.02).is_err());
        assert!(NoiseSchedule::linear(10, 0.0, 0.02).is_err());
        assert!(NoiseSchedule::linear(10, -1e-4, 0.02).is_err());
        assert!(NoiseSchedule::linear(10, 1e-4, 1.0).is_err());
        assert!(NoiseSchedule::linear(10, 0.02, 1e-4).is_err());
        assert!(NoiseSchedule::linear(10, f64::NAN, 0.02).is_err());
    }

    #[test]
    fn lookup_endpoints_and_range() {
        let s = NoiseSchedule::standard();
        let first = s.lookup(1).unwrap();
        assert_eq!(first.beta, 1e-4);
        assert!((first.alpha - 0.9999).abs() < 1e-15);
        assert!((first.alpha_bar - 0.9999).abs() < 1e-15);
        assert!((s.lookup(1000).unwrap().beta - 0.02).abs() < 1e-15);
        assert!(matches!(s.lookup(0), Err(Error::StepOutOfRange { t: 0, max: 1000 })));
        assert!(s.lookup(1001).is_err());
    }

    #[test]
    fn deterministic_construction() {
        assert_eq!(NoiseSchedule::standard(), NoiseSchedule::standard());
    }
}
