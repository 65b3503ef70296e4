use std::path::PathBuf;

use tmcdiff::data::manifest::load_srgb;
use tmcdiff::net::{DenoiserConfig, DenoiserModel};
use tmcdiff::registry::condition_paths;
use tmcdiff::schedule::ScheduleParams;
use tmcdiff::trainer::{fit, load_checkpoint, TrainConfig, TrainState, TrainingSet};
use tmcdiff::{Error, Result};

use super::{condition_input, io_err, open_manifest, parse_split, select_items};
use crate::config::{archive, settings};

settings!(
    /// Model, schedule and optimizer settings for `train`.
    TrainSettings, "train" {
        out: PathBuf = PathBuf::from("runs/train"),
        seed: u64 = 0,
        manifest: PathBuf = PathBuf::from("data/manifest.json"),
        split: String = "train".into(),
        ev: Option<f64> = None,
        zoom: usize = 1,
        condition: String = "raw".into(),
        tmc: bool = true,
        /// `auto` picks unrolled_depth1 with TMC and disabled without.
        tmc_mode: String = "auto".into(),
        base_channels: usize = 16,
        channel_multipliers: Vec<usize> = vec![1, 2, 4],
        time_embed_dim: usize = 32,
        attn_heads: usize = 2,
        attn_head_dim: usize = 16,
        convnext_mult: usize = 2,
        diffusion_steps: usize = ScheduleParams::default().steps,
        beta_min: f64 = ScheduleParams::default().beta_min,
        beta_max: f64 = ScheduleParams::default().beta_max,
        eta: f64 = 0.0,
        lr: f64 = TrainConfig::default().lr,
        lr_min: f64 = TrainConfig::default().lr_min,
        adam_beta1: f64 = TrainConfig::default().adam_beta1,
        adam_beta2: f64 = TrainConfig::default().adam_beta2,
        adam_eps: f64 = TrainConfig::default().adam_eps,
        batch_size: usize = TrainConfig::default().batch_size,
        train_steps: usize = TrainConfig::default().steps,
        sgdr_period: usize = TrainConfig::default().sgdr_period,
        sgdr_mult: usize = TrainConfig::default().sgdr_mult,
        checkpoint_every: usize = 0,
        log_every: usize = 100,
        /// Continue from this checkpoint instead of initializing.
        resume: Option<PathBuf> = None,
    }
);

impl TrainSettings {
    pub fn tmc_mode(&self) -> String {
        match (self.tmc_mode.as_str(), self.tmc) {
            ("auto", true) => "unrolled_depth1".into(),
            ("auto", false) => "disabled".into(),
            (m, _) => m.into(),
        }
    }

    pub fn schedule(&self) -> ScheduleParams {
        ScheduleParams { steps: self.diffusion_steps, beta_min: self.beta_min, beta_max: self.beta_max, eta: self.eta }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            lr: self.lr,
            lr_min: self.lr_min,
            adam_beta1: self.adam_beta1,
            adam_beta2: self.adam_beta2,
            adam_eps: self.adam_eps,
            batch_size: self.batch_size,
            steps: self.train_steps,
            sgdr_period: self.sgdr_period,
            sgdr_mult: self.sgdr_mult,
            tmc_mode: self.tmc_mode(),
            seed: self.seed,
            checkpoint_every: self.checkpoint_every,
        }
    }

    pub fn denoiser_config(&self, channels: usize) -> DenoiserConfig {
        DenoiserConfig {
            base_channels: self.base_channels,
            channel_multipliers: self.channel_multipliers.clone(),
            time_embed_dim: self.time_embed_dim,
            attn_heads: self.attn_heads,
            attn_head_dim: self.attn_head_dim,
            convnext_mult: self.convnext_mult,
            diffusion_steps: self.diffusion_steps,
            ..DenoiserConfig::for_channels(channels, self.tmc)
        }
    }
}

pub struct TrainOutput {
    pub checkpoint: PathBuf,
    pub loss_csv: PathBuf,
    pub schedule_csv: PathBuf,
    pub pairs: usize,
}

pub fn cmd_train(s: &TrainSettings) -> Result<TrainOutput> {
    let factory = *condition_paths().get(&s.condition)?;
    let (manifest, root) = open_manifest(&s.manifest)?;
    let items = select_items(&manifest, parse_split(&s.split)?, s.ev, s.zoom);
    if items.is_empty() {
        return Err(Error::Input(format!("no training pairs in split `{}`", s.split)));
    }
    let mut targets = Vec::with_capacity(items.len());
    let mut inputs = Vec::with_capacity(items.len());
    for item in &items {
        let gt = item.target.as_ref().ok_or_else(|| Error::Input(format!("{} has no x{} target", item.scene_id, s.zoom)))?;
        targets.push(load_srgb(&root, &gt.srgb_path)?);
        inputs.push(condition_input(&root, &item.entry, &s.condition)?);
    }
    let data = TrainingSet::new(targets, inputs)?;
    let channels = data.batch(&[0])?.x0.channels();
    let config = s.train_config();
    let schedule = s.schedule();

    let mut state = match &s.resume {
        Some(path) => {
            let ck = load_checkpoint(path)?;
            if ck.state.denoiser.config().tmc_enabled != s.tmc || ck.state.condition.name() != s.condition {
                return Err(Error::Config(format!("{} was trained with a different tmc/condition setup", path.display())));
            }
            ck.state
        }
        None => {
            let denoiser = DenoiserModel::new(s.denoiser_config(channels), s.seed)?;
            let condition = factory(channels, s.zoom).build(s.seed.wrapping_add(1))?;
            TrainState::new(denoiser, condition, &config)
        }
    };
    archive(s)?;
    let log_every = s.log_every;
    let out = fit(&mut state, &data, &schedule, &config, &s.out, |step, loss, lr| {
        if log_every > 0 && step % log_every == 0 {
            eprintln!("step {step} loss {loss:.6} lr {lr:.3e}");
        }
    })?;
    let schedule_csv = s.out.join("schedule.csv");
    let file = std::fs::File::create(&schedule_csv).map_err(io_err(&schedule_csv))?;
    schedule.build()?.write_csv(std::io::BufWriter::new(file)).map_err(io_err(&schedule_csv))?;
    Ok(TrainOutput { checkpoint: out.checkpoint, loss_csv: out.loss_csv, schedule_csv, pairs: data.len() })
}
