//! Epsilon-predicting U-Net.
//!
//! Input channels are stacked as `[x_t | condition | tmc]`. That order is part
//! of the checkpoint contract.

mod layers;

use autograd::{Graph, ParamTag, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use layers::{Ctx, ParamLayout, Slot, UNet, UNetSpec};
pub(crate) use layers::{Conv, ConvSpec, Init, Upsample};

use crate::error::{Error, Result};
use crate::image::ImagePlanes;
use crate::schedule::DEFAULT_STEPS;

pub const DENOISER_TAG: ParamTag = 0;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    pub base_channels: usize,
    pub channel_multipliers: Vec<usize>,
    pub time_embed_dim: usize,
    pub tmc_enabled: bool,
    pub attn_heads: usize,
    pub attn_head_dim: usize,
    /// Width expansion inside ConvNext blocks.
    pub convnext_mult: usize,
    /// Number of diffusion steps the time embedding is defined over.
    pub diffusion_steps: usize,
}

impl DenoiserConfig {
    /// Small single-channel default.
    pub fn toy(tmc_enabled: bool) -> Self {
        Self::for_channels(1, tmc_enabled)
    }

    pub fn for_channels(channels: usize, tmc_enabled: bool) -> Self {
        Self {
            in_channels: channels * (2 + tmc_enabled as usize),
            out_channels: channels,
            base_channels: 16,
            channel_multipliers: vec![1, 2, 4],
            time_embed_dim: 32,
            tmc_enabled,
            attn_heads: 2,
            attn_head_dim: 16,
            convnext_mult: 2,
            diffusion_steps: DEFAULT_STEPS,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let positives = [
            ("in_channels", self.in_channels),
            ("out_channels", self.out_channels),
            ("base_channels", self.base_channels),
            ("time_embed_dim", self.time_embed_dim),
            ("attn_heads", self.attn_heads),
            ("attn_head_dim", self.attn_head_dim),
            ("convnext_mult", self.convnext_mult),
            ("diffusion_steps", self.diffusion_steps),
        ];
        if let Some((name, _)) = positives.iter().find(|(_, v)| *v == 0) {
            return bad(format!("{name} must be positive"));
        }
        let expect = self.out_channels * (2 + self.tmc_enabled as usize);
        if self.in_channels != expect {
            return bad(format!(
                "in_channels = {} but [x_t | cond{}] needs {expect}",
                self.in_channels,
                if self.tmc_enabled { " | tmc" } else { "" }
            ));
        }
        if self.channel_multipliers.is_empty() || self.channel_multipliers.contains(&0) {
            return bad("channel_multipliers must be non-empty and positive".into());
        }
        if self.channel_multipliers.windows(2).any(|w| w[1] < w[0]) {
            return bad("channel_multipliers must be nondecreasing".into());
        }
        if self.time_embed_dim % 2 != 0 {
            return bad("time_embed_dim must be even".into());
        }
        Ok(())
    }

    pub(crate) fn unet_spec(&self) -> UNetSpec {
        UNetSpec {
            in_channels: self.in_channels,
            out_channels: self.out_channels,
            base_channels: self.base_channels,
            channel_multipliers: self.channel_multipliers.clone(),
            time_dim: Some(self.time_embed_dim),
            heads: self.attn_heads,
            dim_head: self.attn_head_dim,
            convnext_mult: self.convnext_mult,
        }
    }
}

/// Sinusoidal embedding `[sin(w_0 t), cos(w_0 t), sin(w_1 t), ...]` with
/// `w_i = 10000^(-i / (dim/2))`.
pub fn time_embedding(t: usize, dim: usize, steps: usize) -> Result<Vec<f64>> {
    if dim == 0 || dim % 2 != 0 {
        return Err(Error::Config(format!("embedding width must be positive and even, got {dim}")));
    }
    if t > steps {
        return Err(Error::OutOfRange {
            what: "time step",
            detail: format!("t = {t}, valid 0..={steps}"),
        });
    }
    let half = dim / 2;
    let mut out = Vec::with_capacity(dim);
    for i in 0..half {
        let w = 10000f64.powf(-(i as f64) / half as f64);
        let a = w * t as f64;
        out.push(a.sin());
        out.push(a.cos());
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct DenoiserModel {
    config: DenoiserConfig,
    net: UNet,
    layout: ParamLayout,
    params: Vec<f64>,
}

impl DenoiserModel {
    pub fn new(config: DenoiserConfig, seed: u64) -> Result<Self> {
        let (net, layout) = Self::build(&config)?;
        let params = layout.initialize(&mut ChaCha8Rng::seed_from_u64(seed));
        Ok(Self {
            config,
            net,
            layout,
            params,
        })
    }

    pub fn from_params(config: DenoiserConfig, params: Vec<f64>) -> Result<Self> {
        let (net, layout) = Self::build(&config)?;
        if params.len() != layout.len() {
            return Err(Error::Checkpoint(format!(
                "config implies {} parameters, payload has {}",
                layout.len(),
                params.len()
            )));
        }
        if params.iter().any(|v| !v.is_finite()) {
            return Err(Error::Checkpoint("non-finite parameter".into()));
        }
        Ok(Self {
            config,
            net,
            layout,
            params,
        })
    }

    fn build(config: &DenoiserConfig) -> Result<(UNet, ParamLayout)> {
        config.validate()?;
        let mut layout = ParamLayout::default();
        let net = UNet::new(&mut layout, "", &config.unet_spec());
        Ok((net, layout))
    }

    /// Parameter count implied by a configuration.
    pub fn param_count(config: &DenoiserConfig) -> Result<usize> {
        Ok(Self::build(config)?.1.len())
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn size_multiple(&self) -> usize {
        self.net.size_multiple()
    }

    /// Check shapes of one call; returns the spatial size.
    pub fn check_inputs(&self, x_t: &[usize], cond: &[usize], tmc: Option<&[usize]>, steps: &[usize]) -> Result<()> {
        let c = &self.config;
        if x_t.len() != 4 || x_t[1] != c.out_channels {
            return Err(Error::Shape(format!("x_t {x_t:?} needs {} channels", c.out_channels)));
        }
        if cond.len() != 4 || cond[1] != c.out_channels || cond[0] != x_t[0] || cond[2..] != x_t[2..] {
            return Err(Error::Shape(format!("condition {cond:?} not congruent with x_t {x_t:?}")));
        }
        match (tmc, c.tmc_enabled) {
            (Some(m), true) if m != x_t => {
                return Err(Error::Shape(format!("tmc {m:?} not congruent with x_t {x_t:?}")));
            }
            (Some(_), false) => return Err(Error::Input("model has no tmc channels".into())),
            (None, true) => return Err(Error::Input("model expects a tmc input".into())),
            _ => {}
        }
        let m = self.size_multiple();
        if x_t[2] % m != 0 || x_t[3] % m != 0 {
            return Err(Error::Shape(format!(
                "spatial size {}x{} must be a multiple of {m}",
                x_t[2], x_t[3]
            )));
        }
        if steps.len() != x_t[0] {
            return Err(Error::Shape(format!("{} steps for batch of {}", steps.len(), x_t[0])));
        }
        if let Some(&t) = steps.iter().find(|&&t| t > c.diffusion_steps) {
            return Err(Error::OutOfRange {
                what: "time step",
                detail: format!("t = {t}, model trained for {}", c.diffusion_steps),
            });
        }
        Ok(())
    }

    /// Builds the forward pass into `g`, reading parameters from `params`
    /// (normally `self.params()`, but a caller may pass a perturbed copy).
    pub fn forward_graph(
        &self,
        g: &mut Graph,
        params: &[f64],
        x_t: Var,
        cond: Var,
        tmc: Option<Var>,
        steps: &[usize],
    ) -> Result<Var> {
        let tmc_shape = tmc.map(|m| g.shape(m).to_vec());
        self.check_inputs(g.shape(x_t), g.shape(cond), tmc_shape.as_deref(), steps)?;
        let dim = self.config.time_embed_dim;
        let mut emb = Vec::with_capacity(steps.len() * dim);
        for &t in steps {
            emb.extend(time_embedding(t, dim, self.config.diffusion_steps)?);
        }
        let temb = g.input(Tensor::new(&[steps.len(), dim], emb));
        let mut parts = vec![x_t, cond];
        parts.extend(tmc);
        let x = g.concat_channels(&parts);
        let mut cx = Ctx {
            g,
            params,
            tag: DENOISER_TAG,
        };
        Ok(self.net.forward(&mut cx, x, Some(temb)))
    }

    /// Inference with one step index per batch item.
    pub fn forward_steps(
        &self,
        x_t: &ImagePlanes,
        cond: &ImagePlanes,
        tmc: Option<&ImagePlanes>,
        steps: &[usize],
    ) -> Result<ImagePlanes> {
        let mut g = Graph::new(false);
        let xv = g.input(x_t.as_tensor().clone());
        let cv = g.input(cond.as_tensor().clone());
        let mv = tmc.map(|m| g.input(m.as_tensor().clone()));
        let out = self.forward_graph(&mut g, &self.params, xv, cv, mv, steps)?;
        ImagePlanes::from_tensor(g.value(out).clone())
    }

    pub fn forward(&self, x_t: &ImagePlanes, cond: &ImagePlanes, tmc: Option<&ImagePlanes>, t: usize) -> Result<ImagePlanes> {
        self.forward_steps(x_t, cond, tmc, &vec![t; x_t.batch()])
    }
}
