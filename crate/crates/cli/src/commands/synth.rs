use std::path::PathBuf;

use tmcdiff::data::corpus::procedural_image;
use tmcdiff::data::manifest::synthesize_dataset;
use tmcdiff::data::{NoiseModel, SynthParams};
use tmcdiff::io::read_png;
use tmcdiff::{Error, ImagePlanes, Result};

use super::io_err;
use crate::config::{archive, settings};

settings!(
    /// Dataset synthesis from the procedural corpus or a directory of PNGs.
    SynthSettings, "synth" {
        out: PathBuf = PathBuf::from("data"),
        seed: u64 = 0,
        /// Directory of clean PNGs; the procedural corpus when unset.
        source_dir: Option<PathBuf> = None,
        scenes: usize = 8,
        size: usize = 32,
        ev_levels: Vec<f64> = vec![-2.0, -3.0, -4.0, -5.0, -6.0],
        iso: u32 = 800,
        zooms: Vec<usize> = vec![1, 2, 4],
        sigma_g: f64 = NoiseModel::default().sigma_g,
        lambda_p: f64 = NoiseModel::default().lambda_p,
        wb_gains: Vec<f64> = vec![1.0, 1.0, 1.0],
        gamma: f64 = 2.2,
        gray: bool = false,
        val: usize = 0,
        test: usize = 2,
    }
);

impl SynthSettings {
    pub fn params(&self) -> Result<SynthParams> {
        let wb: [f64; 3] = self
            .wb_gains
            .clone()
            .try_into()
            .map_err(|_| Error::Config(format!("wb_gains needs 3 values, got {}", self.wb_gains.len())))?;
        let p = SynthParams {
            ev_levels: self.ev_levels.clone(),
            iso: self.iso,
            zooms: self.zooms.clone(),
            noise: NoiseModel { sigma_g: self.sigma_g, lambda_p: self.lambda_p },
            wb_gains: wb,
            gamma: self.gamma,
            gray: self.gray,
            ..SynthParams::default()
        };
        p.validate()?;
        Ok(p)
    }

    fn sources(&self, multiple: usize) -> Result<Vec<ImagePlanes>> {
        let Some(dir) = &self.source_dir else {
            if self.size == 0 || self.size % multiple != 0 {
                return Err(Error::Config(format!("size {} must be a positive multiple of {multiple}", self.size)));
            }
            return Ok((0..self.scenes as u64).map(|i| procedural_image(i, self.size, self.seed)).collect());
        };
        let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
            .map_err(io_err(dir))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
            .collect();
        paths.sort();
        paths
            .iter()
            .map(|p| {
                let img = read_png(p)?;
                let (h, w) = img.hw();
                let side = h.min(w) / multiple * multiple;
                if side == 0 {
                    return Err(Error::Input(format!("{} is smaller than {multiple} px", p.display())));
                }
                let (oy, ox) = ((h - side) / 2, (w - side) / 2);
                Ok(ImagePlanes::from_fn([1, img.channels(), side, side], |_, c, y, x| img.get(0, c, y + oy, x + ox)))
            })
            .collect()
    }
}

pub struct SynthOutput {
    pub manifest: PathBuf,
    pub scenes: usize,
    pub low_light: usize,
    pub ground_truth: usize,
}

pub fn cmd_synth(s: &SynthSettings) -> Result<SynthOutput> {
    let params = s.params()?;
    let sources = s.sources(2 * params.max_zoom())?;
    if sources.is_empty() {
        return Err(Error::Input("source corpus is empty".into()));
    }
    archive(s)?;
    let manifest = synthesize_dataset(&s.out, &sources, &params, s.seed, s.val, s.test)?;
    Ok(SynthOutput {
        manifest: s.out.join("manifest.json"),
        scenes: manifest.records.len(),
        low_light: manifest.records.iter().map(|r| r.low_light.len()).sum(),
        ground_truth: manifest.records.iter().map(|r| r.ground_truth.len()).sum(),
    })
}
