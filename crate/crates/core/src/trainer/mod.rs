//! Joint optimization of the denoiser and the condition path.

mod checkpoint;
mod optim;

use std::fmt::Debug;
use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use autograd::{Graph, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_VERSION};
pub use optim::{sgdr_lr, Adam};

use crate::condition::{ConditionPath, PI_TAG};
use crate::diffusion::{diffuse_batch, predict_x0_batch};
use crate::error::{Error, Result};
use crate::image::ImagePlanes;
use crate::net::{DenoiserModel, DENOISER_TAG};
use crate::registry::tmc_strategies;
use crate::schedule::{DiffusionSchedule, ScheduleParams};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    /// Floor of the cosine schedule.
    pub lr_min: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub sgdr_period: usize,
    pub sgdr_mult: usize,
    /// Registered name of a [`TmcStrategy`].
    pub tmc_mode: String,
    pub seed: u64,
    /// Checkpoint interval in steps; 0 keeps only the final checkpoint.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            lr_min: 0.0,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            batch_size: 8,
            steps: 2000,
            sgdr_period: 500,
            sgdr_mult: 2,
            tmc_mode: "unrolled_depth1".into(),
            seed: 0,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if !(self.lr > 0.0) || !(self.lr_min >= 0.0) || self.lr_min > self.lr {
            return bad("need 0 <= lr_min <= lr and lr > 0");
        }
        for b in [self.adam_beta1, self.adam_beta2] {
            if !(b > 0.0 && b < 1.0) {
                return bad("adam betas must lie in (0, 1)");
            }
        }
        if !(self.adam_eps > 0.0) {
            return bad("adam_eps must be positive");
        }
        if self.batch_size == 0 || self.sgdr_period == 0 || self.sgdr_mult == 0 {
            return bad("batch_size, sgdr_period and sgdr_mult must be positive");
        }
        tmc_strategies().get(&self.tmc_mode)?;
        Ok(())
    }

    pub fn strategy(&self) -> Result<Box<dyn TmcStrategy>> {
        Ok(tmc_strategies().get(&self.tmc_mode)?())
    }

    /// Learning rate of the update that follows `completed` updates.
    pub fn lr_at(&self, completed: usize) -> f64 {
        sgdr_lr(completed, self.lr, self.lr_min, self.sgdr_period, self.sgdr_mult)
    }
}

/// Inputs a [`TmcStrategy`] may use to build the time-melding channel.
pub struct TmcContext<'a> {
    pub model: &'a DenoiserModel,
    pub x0: &'a ImagePlanes,
    pub eps: &'a ImagePlanes,
    pub t: &'a [usize],
    /// Condition image (already at target resolution).
    pub condition: &'a ImagePlanes,
    pub schedule: &'a DiffusionSchedule,
}

/// How the time-melding input `mu^(t+1)` is produced during training.
pub trait TmcStrategy: Debug + Send + Sync {
    fn name(&self) -> &'static str;

    fn uses_tmc(&self) -> bool {
        true
    }

    /// Gradient-free time-melding input, or `None` without TMC.
    fn training_tmc(&self, ctx: &TmcContext<'_>) -> Result<Option<ImagePlanes>>;
}

/// The clean target itself.
#[derive(Clone, Copy, Debug)]
pub struct TeacherForced;

impl TmcStrategy for TeacherForced {
    fn name(&self) -> &'static str {
        "teacher_forced"
    }

    fn training_tmc(&self, ctx: &TmcContext<'_>) -> Result<Option<ImagePlanes>> {
        Ok(Some(ctx.x0.clone()))
    }
}

/// One model step from `x_{t+1}` (built with the same noise) with the clean
/// target in the time-melding slot. At `t = T` the condition image stands in,
/// as it does at the head of sampling.
#[derive(Clone, Copy, Debug)]
pub struct UnrolledDepth1;

impl TmcStrategy for UnrolledDepth1 {
    fn name(&self) -> &'static str {
        "unrolled_depth1"
    }

    fn training_tmc(&self, ctx: &TmcContext<'_>) -> Result<Option<ImagePlanes>> {
        let steps = ctx.schedule.steps();
        let inner: Vec<usize> = (0..ctx.t.len()).filter(|&i| ctx.t[i] < steps).collect();
        let mut out = ctx.condition.clone();
        if inner.is_empty() {
            return Ok(Some(out));
        }
        let pick = |img: &ImagePlanes| ImagePlanes::stack(&inner.iter().map(|&i| img.item(i)).collect::<Vec<_>>());
        let x0 = pick(ctx.x0)?;
        let eps = pick(ctx.eps)?;
        let cond = pick(ctx.condition)?;
        let next: Vec<usize> = inner.iter().map(|&i| ctx.t[i] + 1).collect();
        let x_next = diffuse_batch(&x0, &next, &eps, ctx.schedule)?;
        let eps_hat = ctx.model.forward_steps(&x_next, &cond, Some(&x0), &next)?;
        let mu = predict_x0_batch(&x_next, &eps_hat, &next, ctx.schedule)?;
        let per = mu.data().len() / inner.len();
        for (k, &i) in inner.iter().enumerate() {
            out.data_mut()[i * per..(i + 1) * per].copy_from_slice(&mu.data()[k * per..(k + 1) * per]);
        }
        Ok(Some(out))
    }
}

#[derive(Clone, Copy, Debug)]
pub struct TmcDisabled;

impl TmcStrategy for TmcDisabled {
    fn name(&self) -> &'static str {
        "disabled"
    }

    fn uses_tmc(&self) -> bool {
        false
    }

    fn training_tmc(&self, _: &TmcContext<'_>) -> Result<Option<ImagePlanes>> {
        Ok(None)
    }
}

/// Mutable training state: both parameter sets, optimizer moments, step.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub denoiser: DenoiserModel,
    pub condition: Box<dyn ConditionPath>,
    pub adam: Adam,
    /// Completed updates.
    pub step: usize,
}

impl TrainState {
    pub fn new(denoiser: DenoiserModel, condition: Box<dyn ConditionPath>, config: &TrainConfig) -> Self {
        let len = denoiser.params().len() + condition.params().len();
        Self {
            denoiser,
            condition,
            adam: Adam::new(len, config.adam_beta1, config.adam_beta2, config.adam_eps),
            step: 0,
        }
    }

    pub fn param_norm(&self) -> f64 {
        self.denoiser
            .params()
            .iter()
            .chain(self.condition.params())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }
}

/// Paired data: clean targets and the matching condition inputs.
#[derive(Clone, Debug)]
pub struct TrainingSet {
    targets: Vec<ImagePlanes>,
    inputs: Vec<ImagePlanes>,
}

impl TrainingSet {
    pub fn new(targets: Vec<ImagePlanes>, inputs: Vec<ImagePlanes>) -> Result<Self> {
        if targets.is_empty() || targets.len() != inputs.len() {
            return Err(Error::Input(format!(
                "need equally many targets and inputs, got {} and {}",
                targets.len(),
                inputs.len()
            )));
        }
        let (t0, i0) = (targets[0].shape(), inputs[0].shape());
        for (t, i) in targets.iter().zip(&inputs) {
            if t.shape() != t0 || i.shape() != i0 || t0[0] != 1 || i0[0] != 1 {
                return Err(Error::Shape("training pairs must be single images of one shape".into()));
            }
        }
        Ok(Self { targets, inputs })
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn target_hw(&self) -> (usize, usize) {
        self.targets[0].hw()
    }

    pub fn batch(&self, indices: &[usize]) -> Result<TrainBatch> {
        Ok(TrainBatch {
            x0: ImagePlanes::stack(&indices.iter().map(|&i| self.targets[i].clone()).collect::<Vec<_>>())?,
            cond_input: ImagePlanes::stack(&indices.iter().map(|&i| self.inputs[i].clone()).collect::<Vec<_>>())?,
        })
    }
}

#[derive(Clone, Debug)]
pub struct TrainBatch {
    pub x0: ImagePlanes,
    pub cond_input: ImagePlanes,
}

/// Random draws of one step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepDraws {
    pub t: Vec<usize>,
    pub eps: ImagePlanes,
}

impl StepDraws {
    pub fn draw(rng: &mut impl Rng, x0_shape: [usize; 4], steps: usize) -> Self {
        let t = (0..x0_shape[0]).map(|_| rng.gen_range(1..=steps)).collect();
        let eps = ImagePlanes::randn(x0_shape, rng);
        Self { t, eps }
    }
}

/// Everything the loss needs, with the time-melding input already fixed.
#[derive(Clone, Debug)]
pub struct PreparedStep {
    pub x0: ImagePlanes,
    pub x_t: ImagePlanes,
    pub eps: ImagePlanes,
    pub t: Vec<usize>,
    pub cond_input: ImagePlanes,
    pub tmc: Option<ImagePlanes>,
}

pub fn prepare_step(
    state: &TrainState,
    batch: &TrainBatch,
    draws: StepDraws,
    strategy: &dyn TmcStrategy,
    schedule: &DiffusionSchedule,
) -> Result<PreparedStep> {
    if strategy.uses_tmc() != state.denoiser.config().tmc_enabled {
        return Err(Error::Config(format!(
            "tmc mode `{}` does not fit a denoiser with tmc_enabled = {}",
            strategy.name(),
            state.denoiser.config().tmc_enabled
        )));
    }
    let x_t = diffuse_batch(&batch.x0, &draws.t, &draws.eps, schedule)?;
    let tmc = if strategy.uses_tmc() {
        let condition = state.condition.condition(&batch.cond_input, batch.x0.hw())?.image;
        let ctx = TmcContext {
            model: &state.denoiser,
            x0: &batch.x0,
            eps: &draws.eps,
            t: &draws.t,
            condition: &condition,
            schedule,
        };
        strategy.training_tmc(&ctx)?
    } else {
        None
    };
    Ok(PreparedStep {
        x0: batch.x0.clone(),
        x_t,
        eps: draws.eps,
        t: draws.t,
        cond_input: batch.cond_input.clone(),
        tmc,
    })
}

/// Loss and, if requested, gradients for both parameter sets.
pub struct LossEval {
    pub loss: f64,
    pub grad_denoiser: Vec<f64>,
    pub grad_condition: Vec<f64>,
}

/// Mean squared noise-prediction error under the given parameters.
pub fn evaluate_loss(
    state: &TrainState,
    denoiser_params: &[f64],
    condition_params: &[f64],
    step: &PreparedStep,
    with_grad: bool,
) -> Result<LossEval> {
    let mut g = Graph::new(with_grad);
    let x_t = g.input(step.x_t.as_tensor().clone());
    let cin = g.input(step.cond_input.as_tensor().clone());
    let cond = state.condition.forward_graph(&mut g, condition_params, cin, step.x0.hw())?;
    let tmc = step.tmc.as_ref().map(|m| g.input(m.as_tensor().clone()));
    let eps_hat = state.denoiser.forward_graph(&mut g, denoiser_params, x_t, cond, tmc, &step.t)?;
    let target = g.input(Tensor::from(step.eps.clone()));
    let loss = g.mse(eps_hat, target);
    let value = g.value(loss).data()[0];
    let (grad_denoiser, grad_condition) = if with_grad {
        let grads = g.backward(loss);
        (
            grads.flat(DENOISER_TAG, denoiser_params.len()),
            grads.flat(PI_TAG, condition_params.len()),
        )
    } else {
        (Vec::new(), Vec::new())
    };
    Ok(LossEval {
        loss: value,
        grad_denoiser,
        grad_condition,
    })
}

/// One optimization step; returns the loss before the update.
pub fn training_step(
    state: &mut TrainState,
    batch: &TrainBatch,
    schedule: &DiffusionSchedule,
    config: &TrainConfig,
    rng: &mut impl Rng,
) -> Result<f64> {
    let strategy = config.strategy()?;
    let draws = StepDraws::draw(rng, batch.x0.shape(), schedule.steps());
    let prepared = prepare_step(state, batch, draws, strategy.as_ref(), schedule)?;
    let eval = evaluate_loss(state, state.denoiser.params(), state.condition.params(), &prepared, true)?;
    let finite = eval.loss.is_finite()
        && eval.grad_denoiser.iter().chain(&eval.grad_condition).all(|g| g.is_finite());
    if !finite {
        return Err(Error::NonFinite {
            step: state.step,
            t_draws: prepared.t,
            param_norm: state.param_norm(),
        });
    }
    let lr = config.lr_at(state.step);
    let TrainState { denoiser, condition, adam, .. } = state;
    adam.update(
        &mut [denoiser.params_mut(), condition.params_mut()],
        &[&eval.grad_denoiser, &eval.grad_condition],
        lr,
    );
    state.step += 1;
    Ok(eval.loss)
}

/// Generator for the draws of update number `step` (0-based). Resuming needs
/// no saved RNG state.
pub fn step_rng(seed: u64, step: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step as u64);
    rng
}

pub struct FitOutput {
    pub checkpoint: PathBuf,
    pub loss_csv: PathBuf,
}

/// Runs updates until `config.steps`, appending `step,loss,lr` rows and
/// writing `checkpoint_<step>.ckpt` files plus `final.ckpt` into `out_dir`.
pub fn fit(
    state: &mut TrainState,
    data: &TrainingSet,
    schedule_params: &ScheduleParams,
    config: &TrainConfig,
    out_dir: &Path,
    mut progress: impl FnMut(usize, f64, f64),
) -> Result<FitOutput> {
    config.validate()?;
    let schedule = schedule_params.build()?;
    if state.denoiser.config().diffusion_steps != schedule.steps() {
        return Err(Error::Config("denoiser and schedule disagree on T".into()));
    }
    config.strategy()?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let loss_csv = out_dir.join("loss.csv");
    let io = |e| Error::io(&loss_csv, e);
    let file = if state.step == 0 {
        let mut f = File::create(&loss_csv).map_err(io)?;
        writeln!(f, "step,loss,lr").map_err(io)?;
        f
    } else {
        OpenOptions::new().append(true).open(&loss_csv).map_err(io)?
    };
    let mut csv = BufWriter::new(file);
    let save = |state: &TrainState, name: &str| -> Result<PathBuf> {
        let path = out_dir.join(name);
        let ckpt = Checkpoint {
            state: state.clone(),
            schedule: *schedule_params,
            tmc_mode: config.tmc_mode.clone(),
        };
        save_checkpoint(&path, &ckpt)?;
        Ok(path)
    };
    while state.step < config.steps {
        let mut rng = step_rng(config.seed, state.step);
        let idx: Vec<usize> = (0..config.batch_size).map(|_| rng.gen_range(0..data.len())).collect();
        let batch = data.batch(&idx)?;
        let lr = config.lr_at(state.step);
        let loss = training_step(state, &batch, &schedule, config, &mut rng)?;
        writeln!(csv, "{},{:.17e},{:.17e}", state.step, loss, lr).map_err(io)?;
        progress(state.step, loss, lr);
        if config.checkpoint_every > 0 && state.step % config.checkpoint_every == 0 {
            csv.flush().map_err(io)?;
            save(state, &format!("checkpoint_{:06}.ckpt", state.step))?;
        }
    }
    csv.flush().map_err(io)?;
    let checkpoint = save(state, "final.ckpt")?;
    Ok(FitOutput { checkpoint, loss_csv })
}

#[cfg(test)]
mod tests;
