use std::path::PathBuf;

use tmcdiff::data::manifest::load_srgb;
use tmcdiff::io::write_png;
use tmcdiff::registry::tmc_inits;
use tmcdiff::sampler::{sample_with, SampleOptions};
use tmcdiff::trainer::load_checkpoint;
use tmcdiff::{Error, ImagePlanes, Result};

use super::{condition_input, io_err, item_stem, open_manifest, parse_split, select_items, write_text};
use crate::config::{archive, settings};

settings!(
    /// Reverse sampling over a manifest split.
    SampleSettings, "sample" {
        out: PathBuf = PathBuf::from("runs/sample"),
        seed: u64 = 0,
        checkpoint: PathBuf = PathBuf::from("runs/train/final.ckpt"),
        manifest: PathBuf = PathBuf::from("data/manifest.json"),
        split: String = "test".into(),
        ev: Option<f64> = None,
        zoom: usize = 1,
        batch_size: usize = 32,
        /// Overrides the checkpoint's eta when set.
        eta: Option<f64> = None,
        tmc_init: String = "condition".into(),
        /// Write every intermediate state and TMC estimate as PNG.
        trace: bool = false,
    }
);

pub const SAMPLE_INDEX: &str = "samples.csv";

pub struct SampleOutput {
    pub index: PathBuf,
    pub images: Vec<PathBuf>,
}

pub fn cmd_sample(s: &SampleSettings) -> Result<SampleOutput> {
    if s.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    let init = *tmc_inits().get(&s.tmc_init)?;
    let ck = load_checkpoint(&s.checkpoint)?;
    let mut params = ck.schedule;
    if let Some(eta) = s.eta {
        params.eta = eta;
    }
    let schedule = params.build()?;
    let (manifest, root) = open_manifest(&s.manifest)?;
    let items = select_items(&manifest, parse_split(&s.split)?, s.ev, s.zoom);
    if items.is_empty() {
        return Err(Error::Input(format!("nothing to sample in split `{}`", s.split)));
    }
    archive(s)?;
    let sample_dir = s.out.join("samples");
    std::fs::create_dir_all(&sample_dir).map_err(io_err(&sample_dir))?;
    let cond_kind = ck.state.condition.name();

    let mut index = String::from("scene_id,ev,iso,zoom,path\n");
    let mut images = Vec::new();
    for (chunk_no, chunk) in items.chunks(s.batch_size).enumerate() {
        let inputs = chunk.iter().map(|it| condition_input(&root, &it.entry, cond_kind)).collect::<Result<Vec<_>>>()?;
        let target_hw = match &chunk[0].target {
            Some(gt) => load_srgb(&root, &gt.srgb_path)?.hw(),
            None => {
                let (h, w) = load_srgb(&root, &chunk[0].entry.srgb_path)?.hw();
                (h * s.zoom, w * s.zoom)
            }
        };
        let cond = ck.state.condition.condition(&ImagePlanes::stack(&inputs)?, target_hw)?;
        let opts = SampleOptions { seed: s.seed.wrapping_add(chunk_no as u64), capture_trace: s.trace, tmc_init: init() };
        let (x0, trace) = sample_with(&ck.state.denoiser, &cond, &schedule, &opts)?;
        for (i, item) in chunk.iter().enumerate() {
            let stem = item_stem(item);
            let rel = PathBuf::from("samples").join(format!("{stem}.png"));
            write_png(&s.out.join(&rel), &x0.item(i))?;
            index += &format!("{},{},{},{},{}\n", item.scene_id, item.entry.ev, item.entry.iso, s.zoom, rel.display());
            images.push(s.out.join(&rel));
            if let Some(tr) = &trace {
                let dir = s.out.join("trace").join(&stem);
                std::fs::create_dir_all(&dir).map_err(io_err(&dir))?;
                let steps = schedule.steps();
                for (k, state) in tr.states.iter().enumerate() {
                    write_png(&dir.join(format!("x_{:03}.png", steps - k)), &state.item(i))?;
                }
                for (k, mu) in tr.tmc_sequence.iter().enumerate() {
                    write_png(&dir.join(format!("tmc_{:03}.png", steps - k)), &mu.item(i))?;
                }
            }
        }
    }
    let index_path = s.out.join(SAMPLE_INDEX);
    write_text(&index_path, &index)?;
    Ok(SampleOutput { index: index_path, images })
}
