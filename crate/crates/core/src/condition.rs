//! Condition pathway: raw Bayer frames, the learnable raw-to-display mapper,
//! and the parameter-free path for display-referred inputs.

use std::fmt::Debug;

use autograd::{softplus, Graph, ParamTag, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::ImagePlanes;
use crate::net::{Conv, ConvSpec, Ctx, ParamLayout, Slot, UNet, UNetSpec, Upsample, Init};

pub const PI_TAG: ParamTag = 1;

/// Single-plane RGGB mosaic with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct RawFrame {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl RawFrame {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height % 2 != 0 || width % 2 != 0 || height == 0 || width == 0 {
            return Err(Error::Shape(format!("raw frame must have even, nonzero sides, got {height}x{width}")));
        }
        if data.len() != height * width {
            return Err(Error::Shape(format!("{} samples for {height}x{width}", data.len())));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Input(format!("raw sample {v} outside [0, 1]")));
        }
        Ok(Self { height, width, data })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.width + x]
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }
}

/// Color index of an RGGB site: 0 = R, 1 = G, 2 = B.
pub fn bayer_color(y: usize, x: usize) -> usize {
    match (y % 2, x % 2) {
        (0, 0) => 0,
        (1, 1) => 2,
        _ => 1,
    }
}

/// 2x2 blocks to `[R, G(row 0), G(row 1), B]`, shape `[1, 4, H/2, W/2]`.
pub fn pack_bayer(raw: &RawFrame) -> ImagePlanes {
    let (h, w) = (raw.height / 2, raw.width / 2);
    ImagePlanes::from_fn([1, 4, h, w], |_, c, y, x| raw.get(2 * y + c / 2, 2 * x + c % 2))
}

pub fn unpack_bayer(packed: &ImagePlanes) -> Result<RawFrame> {
    let [n, c, h, w] = packed.shape();
    if n != 1 || c != 4 {
        return Err(Error::Shape(format!("expected [1, 4, h, w], got {:?}", packed.shape())));
    }
    let mut data = vec![0.0; 4 * h * w];
    for ch in 0..4 {
        for y in 0..h {
            for x in 0..w {
                data[(2 * y + ch / 2) * 2 * w + 2 * x + ch % 2] = packed.get(0, ch, y, x);
            }
        }
    }
    RawFrame::new(2 * h, 2 * w, data)
}

/// Condition image at target resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditionOutput {
    pub image: ImagePlanes,
    /// Effective gamma of the raw mapper; absent for the identity path.
    pub gamma: Option<f64>,
}

/// Keys cubic convolution kernel with `a = -0.5`.
fn cubic(x: f64) -> f64 {
    let a = -0.5;
    let x = x.abs();
    if x <= 1.0 {
        ((a + 2.0) * x - (a + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        ((a * x - 5.0 * a) * x + 8.0 * a) * x - 4.0 * a
    } else {
        0.0
    }
}

/// Per output index: four source indices (edge-clamped) and weights.
fn cubic_taps(src: usize, dst: usize) -> Vec<([usize; 4], [f64; 4])> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|o| {
            let s = (o as f64 + 0.5) * scale - 0.5;
            let base = s.floor();
            let f = s - base;
            let mut idx = [0; 4];
            let mut wts = [0.0; 4];
            for j in 0..4 {
                let i = base as isize - 1 + j as isize;
                idx[j] = i.clamp(0, src as isize - 1) as usize;
                wts[j] = cubic(f - (j as f64 - 1.0));
            }
            (idx, wts)
        })
        .collect()
}

/// Separable bicubic resampling with half-pixel centers and edge clamping.
pub fn bicubic_resize(image: &ImagePlanes, target_hw: (usize, usize)) -> ImagePlanes {
    let [n, c, h, w] = image.shape();
    let (th, tw) = target_hw;
    if (th, tw) == (h, w) {
        return image.clone();
    }
    let ty = cubic_taps(h, th);
    let tx = cubic_taps(w, tw);
    let mut out = ImagePlanes::zeros([n, c, th, tw]);
    let mut rows = vec![0.0; h * tw];
    for b in 0..n {
        for ch in 0..c {
            let p = image.plane(b, ch);
            for y in 0..h {
                for (x, (idx, wt)) in tx.iter().enumerate() {
                    rows[y * tw + x] = (0..4).map(|j| wt[j] * p[y * w + idx[j]]).sum();
                }
            }
            for (y, (idx, wt)) in ty.iter().enumerate() {
                for x in 0..tw {
                    let v: f64 = (0..4).map(|j| wt[j] * rows[idx[j] * tw + x]).sum();
                    out.set(b, ch, y, x, v);
                }
            }
        }
    }
    out
}

/// Identity on values; bicubic upsampling when the size differs.
pub fn pi_srgb(image: &ImagePlanes, target_hw: (usize, usize)) -> Result<ConditionOutput> {
    if !matches!(image.channels(), 1 | 3) {
        return Err(Error::Shape(format!("display-referred condition needs 1 or 3 channels, got {}", image.channels())));
    }
    check_target(image.hw(), target_hw)?;
    Ok(ConditionOutput {
        image: bicubic_resize(image, target_hw),
        gamma: None,
    })
}

fn check_target(src: (usize, usize), target: (usize, usize)) -> Result<()> {
    if target.0 < src.0 || target.1 < src.1 {
        return Err(Error::Shape(format!("target {target:?} smaller than condition {src:?}")));
    }
    Ok(())
}

/// `clamp01(z)^(1/gamma)`.
pub fn gamma_layer(z: f64, gamma: f64) -> f64 {
    z.clamp(0.0, 1.0).powf(1.0 / gamma)
}

/// Stored value whose softplus is `gamma`.
pub fn gamma_to_raw(gamma: f64) -> f64 {
    gamma.exp_m1().ln()
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PiRawConfig {
    pub out_channels: usize,
    pub base_channels: usize,
    pub channel_multipliers: Vec<usize>,
    /// Learned x2 stages between the packed grid and the target grid.
    pub upsample_stages: usize,
    pub attn_heads: usize,
    pub attn_head_dim: usize,
    pub convnext_mult: usize,
    /// Initial effective gamma, stored in thousandths.
    pub gamma_init_milli: u32,
}

impl PiRawConfig {
    /// Mapper for a `zoom`-times super-resolution target.
    pub fn toy(out_channels: usize, zoom: usize) -> Self {
        Self {
            out_channels,
            base_channels: 8,
            channel_multipliers: vec![1, 2],
            upsample_stages: 1 + zoom.trailing_zeros() as usize,
            attn_heads: 1,
            attn_head_dim: 8,
            convnext_mult: 2,
            gamma_init_milli: 2200,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.out_channels == 0 || self.base_channels == 0 || self.attn_heads == 0 || self.attn_head_dim == 0 || self.convnext_mult == 0 {
            return Err(Error::Config("raw mapper widths must be positive".into()));
        }
        if self.channel_multipliers.is_empty() || self.channel_multipliers.contains(&0) {
            return Err(Error::Config("raw mapper multipliers must be non-empty and positive".into()));
        }
        if self.gamma_init_milli == 0 {
            return Err(Error::Config("initial gamma must be positive".into()));
        }
        Ok(())
    }
}

/// U-Net on the packed mosaic, learned upsampling, 1x1 head, sigmoid, gamma.
#[derive(Clone, Debug)]
pub struct PiRawNet {
    config: PiRawConfig,
    unet: UNet,
    ups: Vec<Upsample>,
    head: Conv,
    gamma: Slot,
    layout: ParamLayout,
}

impl PiRawNet {
    pub fn new(config: PiRawConfig) -> Result<Self> {
        config.validate()?;
        let mut layout = ParamLayout::default();
        let b = config.base_channels;
        let unet = UNet::new(
            &mut layout,
            "pi.",
            &UNetSpec {
                in_channels: 4,
                out_channels: b,
                base_channels: b,
                channel_multipliers: config.channel_multipliers.clone(),
                time_dim: None,
                heads: config.attn_heads,
                dim_head: config.attn_head_dim,
                convnext_mult: config.convnext_mult,
            },
        );
        let ups = (0..config.upsample_stages)
            .map(|i| Upsample::new(&mut layout, &format!("pi.up{i}"), b, b))
            .collect();
        let head = Conv::new(&mut layout, "pi.head", ConvSpec::new(b, config.out_channels, 1));
        let g0 = gamma_to_raw(config.gamma_init_milli as f64 / 1000.0);
        let gamma = layout.alloc("pi.gamma".into(), vec![1], Init::Const(g0));
        Ok(Self {
            config,
            unet,
            ups,
            head,
            gamma,
            layout,
        })
    }

    pub fn config(&self) -> &PiRawConfig {
        &self.config
    }

    pub fn param_count(&self) -> usize {
        self.layout.len()
    }

    pub fn init_params(&self, seed: u64) -> Vec<f64> {
        self.layout.initialize(&mut ChaCha8Rng::seed_from_u64(seed))
    }

    pub fn gamma(&self, params: &[f64]) -> f64 {
        softplus(params[self.gamma.offset])
    }

    pub fn target_hw(&self, packed_hw: (usize, usize)) -> (usize, usize) {
        let f = 1 << self.config.upsample_stages;
        (packed_hw.0 * f, packed_hw.1 * f)
    }

    pub fn forward_graph(&self, g: &mut Graph, params: &[f64], packed: Var, target_hw: (usize, usize)) -> Result<Var> {
        let s = g.shape(packed).to_vec();
        if s.len() != 4 || s[1] != 4 {
            return Err(Error::Shape(format!("packed raw must be [n, 4, h, w], got {s:?}")));
        }
        check_target((s[2], s[3]), target_hw)?;
        if self.target_hw((s[2], s[3])) != target_hw {
            return Err(Error::Shape(format!(
                "mapper produces {:?} from {}x{}, target is {target_hw:?}",
                self.target_hw((s[2], s[3])),
                s[2],
                s[3]
            )));
        }
        let m = self.unet.size_multiple();
        if s[2] % m != 0 || s[3] % m != 0 {
            return Err(Error::Shape(format!("packed size {}x{} must be a multiple of {m}", s[2], s[3])));
        }
        let mut cx = Ctx { g, params, tag: PI_TAG };
        let mut h = self.unet.forward(&mut cx, packed, None);
        for up in &self.ups {
            h = up.forward(&mut cx, h);
            h = cx.g.gelu(h);
        }
        let z = self.head.forward(&mut cx, h);
        let z = cx.g.sigmoid(z);
        let raw = cx.p(&self.gamma);
        Ok(cx.g.gamma_curve(z, raw))
    }
}

/// Serializable description of a condition path.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ConditionSpec {
    Srgb { channels: usize },
    Raw(PiRawConfig),
}

impl ConditionSpec {
    pub fn name(&self) -> &'static str {
        match self {
            ConditionSpec::Srgb { .. } => "srgb",
            ConditionSpec::Raw(_) => "raw",
        }
    }

    pub fn build(&self, seed: u64) -> Result<Box<dyn ConditionPath>> {
        match self {
            ConditionSpec::Srgb { channels } => Ok(Box::new(SrgbIdentity::new(*channels)?)),
            ConditionSpec::Raw(cfg) => {
                let net = PiRawNet::new(cfg.clone())?;
                let params = net.init_params(seed);
                Ok(Box::new(RawMapper { net, params }))
            }
        }
    }

    pub fn from_params(&self, params: Vec<f64>) -> Result<Box<dyn ConditionPath>> {
        let mut path = self.build(0)?;
        if path.params().len() != params.len() {
            return Err(Error::Checkpoint(format!(
                "condition path expects {} parameters, payload has {}",
                path.params().len(),
                params.len()
            )));
        }
        path.params_mut().copy_from_slice(&params);
        Ok(path)
    }
}

/// The condition pathway `pi`, selected by name at run time.
pub trait ConditionPath: Debug + Send + Sync {
    fn name(&self) -> &'static str;

    fn spec(&self) -> ConditionSpec;

    /// Channels of the inputs this path consumes.
    fn input_channels(&self) -> usize;

    fn params(&self) -> &[f64];

    fn params_mut(&mut self) -> &mut [f64];

    /// Effective gamma under `params`, if the path has one.
    fn gamma(&self, params: &[f64]) -> Option<f64>;

    /// Condition image at `target_hw`, reading parameters from `params`.
    fn forward_graph(&self, g: &mut Graph, params: &[f64], input: Var, target_hw: (usize, usize)) -> Result<Var>;

    fn clone_box(&self) -> Box<dyn ConditionPath>;

    fn condition(&self, input: &ImagePlanes, target_hw: (usize, usize)) -> Result<ConditionOutput> {
        let mut g = Graph::new(false);
        let x = g.input(input.as_tensor().clone());
        let out = self.forward_graph(&mut g, self.params(), x, target_hw)?;
        Ok(ConditionOutput {
            image: ImagePlanes::from_tensor(g.value(out).clone())?,
            gamma: self.gamma(self.params()),
        })
    }
}

impl Clone for Box<dyn ConditionPath> {
    fn clone(&self) -> Self {
        self.clone_box()
    }
}

#[derive(Clone, Debug)]
pub struct SrgbIdentity {
    channels: usize,
}

impl SrgbIdentity {
    pub fn new(channels: usize) -> Result<Self> {
        if !matches!(channels, 1 | 3) {
            return Err(Error::Config(format!("display-referred condition needs 1 or 3 channels, got {channels}")));
        }
        Ok(Self { channels })
    }
}

impl ConditionPath for SrgbIdentity {
    fn name(&self) -> &'static str {
        "srgb"
    }

    fn spec(&self) -> ConditionSpec {
        ConditionSpec::Srgb { channels: self.channels }
    }

    fn input_channels(&self) -> usize {
        self.channels
    }

    fn params(&self) -> &[f64] {
        &[]
    }

    fn params_mut(&mut self) -> &mut [f64] {
        &mut []
    }

    fn gamma(&self, _: &[f64]) -> Option<f64> {
        None
    }

    fn forward_graph(&self, g: &mut Graph, _: &[f64], input: Var, target_hw: (usize, usize)) -> Result<Var> {
        let s = g.shape(input).to_vec();
        if s.len() != 4 || s[1] != self.channels {
            return Err(Error::Shape(format!("expected {} condition channels, got {s:?}", self.channels)));
        }
        if (s[2], s[3]) == target_hw {
            return Ok(input);
        }
        let img = ImagePlanes::from_tensor(g.value(input).clone())?;
        let up = pi_srgb(&img, target_hw)?.image;
        Ok(g.input(Tensor::from(up)))
    }

    fn clone_box(&self) -> Box<dyn ConditionPath> {
        Box::new(self.clone())
    }
}

#[derive(Clone, Debug)]
pub struct RawMapper {
    net: PiRawNet,
    params: Vec<f64>,
}

impl RawMapper {
    pub fn net(&self) -> &PiRawNet {
        &self.net
    }
}

/// Raw mapper forward on one packed frame.
pub fn pi_raw(model: &RawMapper, packed: &ImagePlanes, target_hw: (usize, usize)) -> Result<ConditionOutput> {
    model.condition(packed, target_hw)
}

impl ConditionPath for RawMapper {
    fn name(&self) -> &'static str {
        "raw"
    }

    fn spec(&self) -> ConditionSpec {
        ConditionSpec::Raw(self.net.config().clone())
    }

    fn input_channels(&self) -> usize {
        4
    }

    fn params(&self) -> &[f64] {
        &self.params
    }

    fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn gamma(&self, params: &[f64]) -> Option<f64> {
        Some(self.net.gamma(params))
    }

    fn forward_graph(&self, g: &mut Graph, params: &[f64], input: Var, target_hw: (usize, usize)) -> Result<Var> {
        self.net.forward_graph(g, params, input, target_hw)
    }

    fn clone_box(&self) -> Box<dyn ConditionPath> {
        Box::new(self.clone())
    }
}
