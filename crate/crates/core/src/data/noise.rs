//! Heteroscedastic shot + read noise with ISO gain.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseModel {
    /// Read-noise std at ISO 100.
    pub sigma_g: f64,
    /// Shot-noise scale at ISO 100.
    pub lambda_p: f64,
}

impl Default for NoiseModel {
    fn default() -> Self {
        Self { sigma_g: 0.04, lambda_p: 0.001 }
    }
}

impl NoiseModel {
    pub const OFF: NoiseModel = NoiseModel { sigma_g: 0.0, lambda_p: 0.0 };

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_g >= 0.0 && self.lambda_p >= 0.0) {
            return Err(Error::OutOfRange { what: "noise parameter", detail: format!("{self:?} must be nonnegative") });
        }
        Ok(())
    }

    pub fn gain(iso: u32) -> f64 {
        iso as f64 / 100.0
    }

    /// `lambda * s * g + (sigma * g)^2`, with the signal floored at zero.
    pub fn variance(&self, signal: f64, iso: u32) -> f64 {
        let g = Self::gain(iso);
        self.lambda_p * signal.max(0.0) * g + (self.sigma_g * g).powi(2)
    }

    /// Noisy copy of `signal`, clipped to `[0, 1]`.
    pub fn apply(&self, signal: &[f64], iso: u32, rng: &mut impl Rng) -> Vec<f64> {
        signal
            .iter()
            .map(|&s| {
                let sd = self.variance(s, iso).sqrt();
                let n = if sd > 0.0 { Normal::new(0.0, sd).unwrap().sample(rng) } else { 0.0 };
                (s + n).clamp(0.0, 1.0)
            })
            .collect()
    }
}
