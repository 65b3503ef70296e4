//! Noise schedule: the cumulative signal-retention sequence `alpha` and the
//! per-step sampling noise `sigma`.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance on the residual radicand `1 - alpha[t-1] - sigma[t]^2`.
pub const RADICAND_TOLERANCE: f64 = 1e-12;

pub const DEFAULT_STEPS: usize = 50;
pub const DEFAULT_BETA_MIN: f64 = 2e-3;
pub const DEFAULT_BETA_MAX: f64 = 0.3;

/// Parameters of a linear-beta schedule, as stored in checkpoints.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleParams {
    pub steps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
    pub eta: f64,
}

impl Default for ScheduleParams {
    fn default() -> Self {
        Self {
            steps: DEFAULT_STEPS,
            beta_min: DEFAULT_BETA_MIN,
            beta_max: DEFAULT_BETA_MAX,
            eta: 0.0,
        }
    }
}

impl ScheduleParams {
    pub fn build(&self) -> Result<DiffusionSchedule> {
        make_schedule(self.steps, self.beta_min, self.beta_max, self.eta)
    }
}

/// Immutable diffusion schedule.
///
/// `alpha` has `T + 1` entries with `alpha[0] = 1`; `sigma` is indexed
/// `1..=T` through [`DiffusionSchedule::sigma`].
#[derive(Clone, Debug, PartialEq)]
pub struct DiffusionSchedule {
    alpha: Vec<f64>,
    sigma: Vec<f64>,
    eta: f64,
}

impl DiffusionSchedule {
    /// Build from an explicit alpha sequence (`alpha[0]` must be 1).
    pub fn from_alphas(alpha: Vec<f64>, eta: f64) -> Result<Self> {
        validate_alpha(&alpha)?;
        let sigma = sigma_from_eta(&alpha, eta)?;
        Ok(Self { alpha, sigma, eta })
    }

    /// Number of diffusion steps `T`.
    pub fn steps(&self) -> usize {
        self.alpha.len() - 1
    }

    pub fn eta(&self) -> f64 {
        self.eta
    }

    /// `alpha[t]` for `t` in `0..=T`.
    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t]
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alpha
    }

    /// `sigma[t]` for `t` in `1..=T`.
    pub fn sigma(&self, t: usize) -> f64 {
        assert!(t >= 1 && t <= self.steps(), "sigma index {t} outside 1..={}", self.steps());
        self.sigma[t - 1]
    }

    pub fn sigmas(&self) -> &[f64] {
        &self.sigma
    }

    pub fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::OutOfRange {
                what: "diffusion step",
                detail: format!("t = {t}, valid 1..={}", self.steps()),
            });
        }
        Ok(())
    }

    /// CSV with header `t,alpha,sigma`; the `t = 0` row has an empty sigma.
    pub fn write_csv(&self, mut out: impl Write) -> std::io::Result<()> {
        writeln!(out, "t,alpha,sigma")?;
        writeln!(out, "0,{:.17e},", self.alpha[0])?;
        for t in 1..=self.steps() {
            writeln!(out, "{t},{:.17e},{:.17e}", self.alpha[t], self.sigma(t))?;
        }
        Ok(())
    }
}

/// Linear-beta schedule: `alpha[t] = prod_{s<=t} (1 - beta_s)` with `beta`
/// linearly spaced over `[beta_min, beta_max]`.
pub fn make_schedule(steps: usize, beta_min: f64, beta_max: f64, eta: f64) -> Result<DiffusionSchedule> {
    if steps == 0 {
        return Err(Error::Schedule("T must be at least 1".into()));
    }
    if !(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0) {
        return Err(Error::Schedule(format!(
            "need 0 < beta_min <= beta_max < 1, got [{beta_min}, {beta_max}]"
        )));
    }
    if !(eta >= 0.0 && eta.is_finite()) {
        return Err(Error::Schedule(format!("eta must be finite and >= 0, got {eta}")));
    }
    let mut alpha = Vec::with_capacity(steps + 1);
    alpha.push(1.0);
    let mut acc = 1.0;
    for s in 0..steps {
        let beta = if steps == 1 {
            beta_min
        } else {
            beta_min + (beta_max - beta_min) * s as f64 / (steps - 1) as f64
        };
        acc *= 1.0 - beta;
        alpha.push(acc);
    }
    DiffusionSchedule::from_alphas(alpha, eta)
}

/// `sigma_t = eta * sqrt((1 - a_{t-1}) / (1 - a_t)) * sqrt(1 - a_t / a_{t-1})`.
pub fn sigma_from_eta(alpha: &[f64], eta: f64) -> Result<Vec<f64>> {
    validate_alpha(alpha)?;
    if !(eta >= 0.0 && eta.is_finite()) {
        return Err(Error::Schedule(format!("eta must be finite and >= 0, got {eta}")));
    }
    let steps = alpha.len() - 1;
    let mut sigma = Vec::with_capacity(steps);
    for t in 1..=steps {
        let (prev, cur) = (alpha[t - 1], alpha[t]);
        let s = if eta == 0.0 {
            0.0
        } else {
            eta * ((1.0 - prev) / (1.0 - cur)).sqrt() * (1.0 - cur / prev).sqrt()
        };
        if 1.0 - prev - s * s < -RADICAND_TOLERANCE {
            return Err(Error::Schedule(format!(
                "sigma[{t}] = {s} violates 1 - alpha[t-1] - sigma^2 >= 0"
            )));
        }
        sigma.push(s);
    }
    Ok(sigma)
}

fn validate_alpha(alpha: &[f64]) -> Result<()> {
    if alpha.len() < 2 {
        return Err(Error::Schedule("alpha needs T + 1 >= 2 entries".into()));
    }
    if alpha[0] != 1.0 {
        return Err(Error::Schedule(format!("alpha[0] must be 1, got {}", alpha[0])));
    }
    for (t, w) in alpha.windows(2).enumerate() {
        let a = w[1];
        if !(a > 0.0 && a <= 1.0) {
            return Err(Error::Schedule(format!("alpha[{}] = {a} outside (0, 1]", t + 1)));
        }
        if a >= w[0] {
            return Err(Error::Schedule(format!(
                "alpha not strictly decreasing at t = {}",
                t + 1
            )));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn single_step_half_beta() {
        let s = make_schedule(1, 0.5, 0.5, 0.0).unwrap();
        assert_eq!(s.alphas(), &[1.0, 0.5]);
        assert_eq!(s.sigmas(), &[0.0]);
    }

    #[test]
    fn two_step_product() {
        let s = make_schedule(2, 0.1, 0.3, 0.0).unwrap();
        // 0.9 * 0.7, evaluated exactly in rational arithmetic: 63/100
        assert!((s.alpha(1) - 0.9).abs() < 1e-15);
        assert!((s.alpha(2) - 0.63).abs() < 1e-15);
    }

    #[test]
    fn reference_ddpm_range_is_monotone_with_zero_sigma() {
        let s = make_schedule(50, 1e-4, 0.02, 0.0).unwrap();
        assert!(s.alpha(50) > 0.0);
        assert!(s.alphas().windows(2).all(|w| w[1] < w[0]));
        assert!(s.sigmas().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn sigma_eta_one_matches_closed_form() {
        let sigma = sigma_from_eta(&[1.0, 0.9, 0.63], 1.0).unwrap();
        assert_eq!(sigma[0], 0.0);
        // sqrt(0.1 / 0.37) * sqrt(1 - 0.7)
        assert!((sigma[1] - 0.284_747_398_725_749_7).abs() < 1e-12, "{}", sigma[1]);
    }

    #[test]
    fn rejects_bad_arguments() {
        assert!(make_schedule(0, 0.1, 0.2, 0.0).is_err());
        assert!(make_schedule(10, 0.0, 0.2, 0.0).is_err());
        assert!(make_schedule(10, 0.3, 0.2, 0.0).is_err());
        assert!(make_schedule(10, 0.1, 1.0, 0.0).is_err());
        assert!(make_schedule(10, 0.1, 0.2, -1.0).is_err());
        assert!(DiffusionSchedule::from_alphas(vec![1.0, 0.5, 0.6], 0.0).is_err());
        assert!(DiffusionSchedule::from_alphas(vec![0.9, 0.5], 0.0).is_err());
        // eta far above one breaks the residual radicand.
        assert!(sigma_from_eta(&[1.0, 0.9, 0.63], 5.0).is_err());
    }

    #[test]
    fn csv_dump_has_one_row_per_step() {
        let s = make_schedule(3, 0.1, 0.2, 0.5).unwrap();
        let mut buf = Vec::new();
        s.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 5);
        assert!(text.starts_with("t,alpha,sigma\n0,"));
    }

    proptest! {
        #[test]
        fn alpha_strictly_decreasing(steps in 1usize..200, lo in 1e-5f64..0.2, span in 0.0f64..0.5) {
            let hi = (lo + span).min(0.9);
            let s = make_schedule(steps, lo, hi, 0.0).unwrap();
            prop_assert_eq!(s.alpha(0), 1.0);
            prop_assert!(s.alphas().windows(2).all(|w| w[1] < w[0] && w[1] > 0.0));
        }

        #[test]
        fn sigma_is_homogeneous_in_eta(steps in 1usize..100, lo in 1e-4f64..0.1, span in 0.0f64..0.3, eta in 0.0f64..0.5) {
            let s1 = make_schedule(steps, lo, lo + span, eta).unwrap();
            let s2 = make_schedule(steps, lo, lo + span, 2.0 * eta).unwrap();
            for (a, b) in s1.sigmas().iter().zip(s2.sigmas()) {
                prop_assert!((2.0 * a - b).abs() <= 1e-12 * b.abs().max(1.0));
            }
        }

        #[test]
        fn residual_radicand_feasible(steps in 1usize..100, lo in 1e-4f64..0.2, span in 0.0f64..0.6, eta in 0.0f64..=1.0) {
            let s = make_schedule(steps, lo, (lo + span).min(0.95), eta).unwrap();
            for t in 1..=s.steps() {
                prop_assert!(1.0 - s.alpha(t - 1) - s.sigma(t).powi(2) >= -RADICAND_TOLERANCE);
            }
        }
    }
}
