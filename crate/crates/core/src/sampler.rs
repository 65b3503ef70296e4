//! Reverse loop from `x_T` to `x_0` with the time-melding recursion.

use std::fmt::Debug;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::condition::ConditionOutput;
use crate::denoiser::Denoiser;
use crate::diffusion::{ddim_step_from_x0, predict_x0};
use crate::error::{Error, Result};
use crate::image::ImagePlanes;
use crate::schedule::DiffusionSchedule;

/// What the time-melding slot holds when entering step `T`.
pub trait TmcInit: Debug + Send + Sync {
    fn name(&self) -> &'static str;
    fn initial(&self, condition: &ImagePlanes) -> ImagePlanes;
}

/// The condition image, the best clean estimate available before sampling.
#[derive(Clone, Copy, Debug)]
pub struct TmcInitCondition;

impl TmcInit for TmcInitCondition {
    fn name(&self) -> &'static str {
        "condition"
    }

    fn initial(&self, condition: &ImagePlanes) -> ImagePlanes {
        condition.clone()
    }
}

#[derive(Clone, Copy, Debug)]
pub struct TmcInitZeros;

impl TmcInit for TmcInitZeros {
    fn name(&self) -> &'static str {
        "zeros"
    }

    fn initial(&self, condition: &ImagePlanes) -> ImagePlanes {
        ImagePlanes::zeros(condition.shape())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleTrace {
    /// `x_T` down to `x_0`.
    pub states: Vec<ImagePlanes>,
    /// Noise predictions for steps `T` down to `1`.
    pub eps: Vec<ImagePlanes>,
    /// Time-melding estimates for steps `T` down to `1`; empty without TMC.
    pub tmc_sequence: Vec<ImagePlanes>,
    pub seed: u64,
}

#[derive(Debug)]
pub struct SampleOptions {
    pub seed: u64,
    pub capture_trace: bool,
    pub tmc_init: Box<dyn TmcInit>,
}

impl SampleOptions {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            capture_trace: false,
            tmc_init: Box::new(TmcInitCondition),
        }
    }

    pub fn with_trace(mut self) -> Self {
        self.capture_trace = true;
        self
    }
}

pub fn sample(
    denoiser: &dyn Denoiser,
    condition: &ConditionOutput,
    schedule: &DiffusionSchedule,
    seed: u64,
    capture_trace: bool,
) -> Result<(ImagePlanes, Option<SampleTrace>)> {
    let opts = SampleOptions {
        capture_trace,
        ..SampleOptions::new(seed)
    };
    sample_with(denoiser, condition, schedule, &opts)
}

pub fn sample_with(
    denoiser: &dyn Denoiser,
    condition: &ConditionOutput,
    schedule: &DiffusionSchedule,
    opts: &SampleOptions,
) -> Result<(ImagePlanes, Option<SampleTrace>)> {
    let cond = &condition.image;
    if cond.channels() != denoiser.out_channels() {
        return Err(Error::Shape(format!(
            "condition has {} channels, denoiser expects {}",
            cond.channels(),
            denoiser.out_channels()
        )));
    }
    if let Some(steps) = denoiser.diffusion_steps() {
        if steps != schedule.steps() {
            return Err(Error::Config(format!(
                "denoiser built for T = {steps}, schedule has T = {}",
                schedule.steps()
            )));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let shape = cond.shape();
    let mut x = ImagePlanes::randn(shape, &mut rng);
    let tmc_on = denoiser.tmc_enabled();
    let mut tmc = tmc_on.then(|| opts.tmc_init.initial(cond));
    let mut trace = opts.capture_trace.then(|| SampleTrace {
        states: vec![x.clone()],
        eps: Vec::new(),
        tmc_sequence: Vec::new(),
        seed: opts.seed,
    });
    for t in (1..=schedule.steps()).rev() {
        let eps = denoiser.predict_eps(&x, cond, tmc.as_ref(), t)?;
        let mu = predict_x0(&x, &eps, t, schedule)?;
        let noise = (schedule.sigma(t) > 0.0).then(|| ImagePlanes::randn(shape, &mut rng));
        x = ddim_step_from_x0(&mu, &eps, t, noise.as_ref(), schedule)?;
        if let Some(tr) = trace.as_mut() {
            tr.states.push(x.clone());
            tr.eps.push(eps);
            if tmc_on {
                tr.tmc_sequence.push(mu.clone());
            }
        }
        if tmc_on {
            tmc = Some(mu);
        }
    }
    Ok((x, trace))
}
