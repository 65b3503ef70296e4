//! Paired low-light / ground-truth synthesis from a clean image.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::isp::{f_isp, mosaic, quantize, DEFAULT_GAMMA, RAW_BITS, SRGB_BITS};
use super::noise::NoiseModel;
use crate::condition::RawFrame;
use crate::error::{Error, Result};
use crate::image::ImagePlanes;
use crate::metrics::rgb_to_y;

pub const MIN_EV: f64 = -6.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthParams {
    pub ev_levels: Vec<f64>,
    pub iso: u32,
    pub zooms: Vec<usize>,
    pub noise: NoiseModel,
    pub wb_gains: [f64; 3],
    pub gamma: f64,
    /// `None` keeps raw samples unquantized.
    pub raw_bits: Option<u32>,
    pub srgb_bits: Option<u32>,
    /// Keep only the luma of every rendered image.
    pub gray: bool,
}

impl Default for SynthParams {
    fn default() -> Self {
        Self {
            ev_levels: vec![-2.0, -3.0, -4.0, -5.0, -6.0],
            iso: 800,
            zooms: vec![1, 2, 4],
            noise: NoiseModel::default(),
            wb_gains: [1.0; 3],
            gamma: DEFAULT_GAMMA,
            raw_bits: Some(RAW_BITS),
            srgb_bits: Some(SRGB_BITS),
            gray: false,
        }
    }
}

impl SynthParams {
    pub fn validate(&self) -> Result<()> {
        if self.ev_levels.is_empty() || self.zooms.is_empty() {
            return Err(Error::Config("need at least one EV level and one zoom".into()));
        }
        if let Some(ev) = self.ev_levels.iter().find(|ev| !(MIN_EV..=0.0).contains(*ev)) {
            return Err(Error::OutOfRange { what: "ev", detail: format!("{ev} outside [{MIN_EV}, 0]") });
        }
        if let Some(z) = self.zooms.iter().find(|z| !matches!(z, 1 | 2 | 4)) {
            return Err(Error::OutOfRange { what: "zoom", detail: format!("{z} not in {{1, 2, 4}}") });
        }
        if self.iso == 0 {
            return Err(Error::OutOfRange { what: "iso", detail: "must be positive".into() });
        }
        self.noise.validate()
    }

    pub fn max_zoom(&self) -> usize {
        self.zooms.iter().copied().max().unwrap_or(1)
    }

    pub fn channels(&self) -> usize {
        if self.gray { 1 } else { 3 }
    }

    fn finish(&self, rgb: ImagePlanes) -> Result<ImagePlanes> {
        let img = if self.gray { rgb_to_y(&rgb)? } else { rgb };
        Ok(match self.srgb_bits {
            Some(b) => img.map(|v| quantize(v, b)),
            None => img,
        })
    }

    fn quantize_raw(&self, data: Vec<f64>) -> Vec<f64> {
        match self.raw_bits {
            Some(b) => data.into_iter().map(|v| quantize(v, b)).collect(),
            None => data,
        }
    }

    /// Render a noise-free, full-exposure radiance map to display values.
    pub fn render(&self, radiance: &ImagePlanes) -> Result<ImagePlanes> {
        let raw = mosaic(radiance)?;
        let raw = RawFrame::new(raw.height(), raw.width(), self.quantize_raw(raw.data().to_vec()))?;
        self.finish(f_isp(&raw, self.wb_gains, self.gamma)?)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LowLightCapture {
    pub ev: f64,
    pub iso: u32,
    pub raw: RawFrame,
    pub srgb: ImagePlanes,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruthRender {
    pub zoom: usize,
    pub srgb: ImagePlanes,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthScene {
    pub low_light: Vec<LowLightCapture>,
    pub ground_truth: Vec<GroundTruthRender>,
}

/// Box-filter downscale by an integer factor.
pub fn area_downscale(image: &ImagePlanes, factor: usize) -> Result<ImagePlanes> {
    let [n, c, h, w] = image.shape();
    if factor == 0 || h % factor != 0 || w % factor != 0 {
        return Err(Error::Shape(format!("{h}x{w} not divisible by {factor}")));
    }
    let norm = (factor * factor) as f64;
    Ok(ImagePlanes::from_fn([n, c, h / factor, w / factor], |b, ch, y, x| {
        let mut acc = 0.0;
        for dy in 0..factor {
            for dx in 0..factor {
                acc += image.get(b, ch, y * factor + dy, x * factor + dx);
            }
        }
        acc / norm
    }))
}

fn as_rgb(clean: &ImagePlanes) -> Result<ImagePlanes> {
    match clean.shape() {
        [1, 3, _, _] => Ok(clean.clone()),
        [1, 1, h, w] => Ok(ImagePlanes::from_fn([1, 3, h, w], |_, _, y, x| clean.get(0, 0, y, x))),
        s => Err(Error::Shape(format!("clean image must be [1, 1|3, h, w], got {s:?}"))),
    }
}

/// Low-light captures at the lowest resolution plus one noise-free render per
/// zoom; zoom `z` is `z` times the capture resolution.
pub fn synth_scene(clean_hr: &ImagePlanes, params: &SynthParams, rng: &mut impl Rng) -> Result<SynthScene> {
    params.validate()?;
    if !clean_hr.data().iter().all(|v| (0.0..=1.0).contains(v)) {
        return Err(Error::Input("clean image must lie in [0, 1]".into()));
    }
    let clean = as_rgb(clean_hr)?;
    let max_zoom = params.max_zoom();
    let radiance = area_downscale(&clean, max_zoom)?;
    let base = mosaic(&radiance)?;

    let mut low_light = Vec::with_capacity(params.ev_levels.len());
    for &ev in &params.ev_levels {
        let scaled: Vec<f64> = base.data().iter().map(|v| v * 2f64.powf(ev)).collect();
        let noisy = params.noise.apply(&scaled, params.iso, rng);
        let raw = RawFrame::new(base.height(), base.width(), params.quantize_raw(noisy))?;
        let srgb = params.finish(f_isp(&raw, params.wb_gains, params.gamma)?)?;
        low_light.push(LowLightCapture { ev, iso: params.iso, raw, srgb });
    }

    let mut ground_truth = Vec::with_capacity(params.zooms.len());
    for &zoom in &params.zooms {
        let radiance = area_downscale(&clean, max_zoom / zoom)?;
        ground_truth.push(GroundTruthRender { zoom, srgb: params.render(&radiance)? });
    }
    Ok(SynthScene { low_light, ground_truth })
}

/// Naive restoration: undo the exposure offset on the raw samples, then run the ISP.
pub fn exposure_baseline(raw: &RawFrame, ev: f64, params: &SynthParams) -> Result<ImagePlanes> {
    let gain = 2f64.powf(-ev);
    let lifted: Vec<f64> = raw.data().iter().map(|v| (v * gain).min(1.0)).collect();
    let raw = RawFrame::new(raw.height(), raw.width(), lifted)?;
    params.finish(f_isp(&raw, params.wb_gains, params.gamma)?)
}

/// Independent stream per scene so generation order never matters.
pub fn scene_rng(seed: u64, scene_index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(scene_index);
    rng
}
