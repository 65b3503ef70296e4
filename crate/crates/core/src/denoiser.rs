//! Anything that predicts the injected noise can drive the sampler.

use crate::error::{Error, Result};
use crate::image::ImagePlanes;
use crate::net::DenoiserModel;
use crate::schedule::DiffusionSchedule;

pub trait Denoiser: Send + Sync {
    /// Channels of `x_t` (and of the prediction).
    fn out_channels(&self) -> usize;

    /// Whether the time-melding input is consumed.
    fn tmc_enabled(&self) -> bool;

    /// Step count the predictor was built for, if it is tied to one.
    fn diffusion_steps(&self) -> Option<usize>;

    fn predict_eps(&self, x_t: &ImagePlanes, cond: &ImagePlanes, tmc: Option<&ImagePlanes>, t: usize) -> Result<ImagePlanes>;
}

impl Denoiser for DenoiserModel {
    fn out_channels(&self) -> usize {
        self.config().out_channels
    }

    fn tmc_enabled(&self) -> bool {
        self.config().tmc_enabled
    }

    fn diffusion_steps(&self) -> Option<usize> {
        Some(self.config().diffusion_steps)
    }

    fn predict_eps(&self, x_t: &ImagePlanes, cond: &ImagePlanes, tmc: Option<&ImagePlanes>, t: usize) -> Result<ImagePlanes> {
        self.forward(x_t, cond, tmc, t)
    }
}

/// Exact noise predictor for pixels drawn iid from `N(mean, std^2)`.
///
/// `E[x0 | x_t] = m + sqrt(a) s^2 / (a s^2 + 1 - a) * (x_t - sqrt(a) m)` and
/// `eps* = (x_t - sqrt(a) E[x0 | x_t]) / sqrt(1 - a)`.
#[derive(Clone, Debug)]
pub struct GaussianOracle {
    pub mean: f64,
    pub std: f64,
    pub schedule: DiffusionSchedule,
    pub channels: usize,
}

impl GaussianOracle {
    pub fn posterior_mean(&self, x_t: f64, t: usize) -> f64 {
        let a = self.schedule.alpha(t);
        let s2 = self.std * self.std;
        let gain = a.sqrt() * s2 / (a * s2 + 1.0 - a);
        self.mean + gain * (x_t - a.sqrt() * self.mean)
    }
}

impl Denoiser for GaussianOracle {
    fn out_channels(&self) -> usize {
        self.channels
    }

    fn tmc_enabled(&self) -> bool {
        false
    }

    fn diffusion_steps(&self) -> Option<usize> {
        Some(self.schedule.steps())
    }

    fn predict_eps(&self, x_t: &ImagePlanes, _: &ImagePlanes, tmc: Option<&ImagePlanes>, t: usize) -> Result<ImagePlanes> {
        if tmc.is_some() {
            return Err(Error::Input("oracle takes no tmc input".into()));
        }
        self.schedule.check_step(t)?;
        let a = self.schedule.alpha(t);
        Ok(x_t.map(|x| (x - a.sqrt() * self.posterior_mean(x, t)) / (1.0 - a).sqrt()))
    }
}
