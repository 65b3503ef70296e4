use std::collections::HashMap;
use std::path::{Path, PathBuf};

use tmcdiff::condition::bicubic_resize;
use tmcdiff::data::isp::{quantize, SRGB_BITS};
use tmcdiff::data::manifest::{load_raw, load_srgb};
use tmcdiff::data::synth::exposure_baseline;
use tmcdiff::io::read_png;
use tmcdiff::metrics::evaluate;
use tmcdiff::{Error, Result};

use super::sample::SAMPLE_INDEX;
use super::{io_err, open_manifest, parse_split, select_items, write_text};
use crate::config::{archive, settings};

settings!(
    /// Metric rows for sampled outputs and the exposure baseline.
    EvalSettings, "eval" {
        out: PathBuf = PathBuf::from("runs/eval"),
        manifest: PathBuf = PathBuf::from("data/manifest.json"),
        /// Output directories of `sample` runs.
        samples: Vec<PathBuf> = Vec::new(),
        /// One label per samples directory; directory names when empty.
        methods: Vec<String> = Vec::new(),
        split: String = "test".into(),
        ev: Option<f64> = None,
        zoom: usize = 1,
        /// Add rows for the exposure-rescaled input.
        baseline: bool = true,
        /// Add ground truth scored against itself.
        sanity: bool = false,
    }
);

pub const BASELINE_METHOD: &str = "exposure_baseline";

#[derive(Clone, Debug, PartialEq)]
pub struct EvalRow {
    pub scene_id: String,
    pub ev: f64,
    pub iso: u32,
    pub zoom: usize,
    pub method: String,
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MethodSummary {
    pub method: String,
    pub count: usize,
    pub psnr: f64,
    pub ssim: f64,
}

pub struct EvalOutput {
    pub csv: PathBuf,
    pub rows: Vec<EvalRow>,
    pub summary: Vec<MethodSummary>,
}

fn read_index(dir: &Path) -> Result<Vec<(String, f64, u32, usize, PathBuf)>> {
    let path = dir.join(SAMPLE_INDEX);
    let text = std::fs::read_to_string(&path).map_err(io_err(&path))?;
    let bad = |n: usize| Error::Format { path: path.clone(), message: format!("malformed line {n}") };
    text.lines()
        .enumerate()
        .skip(1)
        .filter(|(_, l)| !l.is_empty())
        .map(|(n, line)| {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 5 {
                return Err(bad(n + 1));
            }
            Ok((
                f[0].to_string(),
                f[1].parse().map_err(|_| bad(n + 1))?,
                f[2].parse().map_err(|_| bad(n + 1))?,
                f[3].parse().map_err(|_| bad(n + 1))?,
                dir.join(f[4]),
            ))
        })
        .collect()
}

pub fn summarize(rows: &[EvalRow]) -> Vec<MethodSummary> {
    let mut order: Vec<String> = Vec::new();
    let mut acc: HashMap<&str, (usize, f64, f64)> = HashMap::new();
    for r in rows {
        let e = acc.entry(&r.method).or_insert_with(|| {
            order.push(r.method.clone());
            (0, 0.0, 0.0)
        });
        e.0 += 1;
        e.1 += r.psnr;
        e.2 += r.ssim;
    }
    order
        .into_iter()
        .map(|m| {
            let (n, p, s) = acc[m.as_str()];
            MethodSummary { method: m, count: n, psnr: p / n as f64, ssim: s / n as f64 }
        })
        .collect()
}

pub fn cmd_eval(s: &EvalSettings) -> Result<EvalOutput> {
    if !s.methods.is_empty() && s.methods.len() != s.samples.len() {
        return Err(Error::Config(format!("{} methods for {} samples directories", s.methods.len(), s.samples.len())));
    }
    let (manifest, root) = open_manifest(&s.manifest)?;
    let gt_path: HashMap<&str, &Path> = manifest
        .records
        .iter()
        .filter_map(|r| r.ground_truth_at(s.zoom).map(|g| (r.scene_id.as_str(), g.srgb_path.as_path())))
        .collect();
    let target = |scene: &str| -> Result<_> {
        let rel = gt_path.get(scene).ok_or_else(|| Error::Input(format!("{scene} has no x{} ground truth", s.zoom)))?;
        load_srgb(&root, rel)
    };
    archive(s)?;

    let mut rows = Vec::new();
    for (k, dir) in s.samples.iter().enumerate() {
        let method = match s.methods.get(k) {
            Some(m) => m.clone(),
            None => dir.file_name().map_or_else(|| format!("method{k}"), |n| n.to_string_lossy().into_owned()),
        };
        for (scene_id, ev, iso, zoom, path) in read_index(dir)? {
            if zoom != s.zoom || s.ev.is_some_and(|v| (v - ev).abs() > 1e-9) {
                continue;
            }
            let m = evaluate(&read_png(&path)?, &target(&scene_id)?)?;
            rows.push(EvalRow { scene_id, ev, iso, zoom, method: method.clone(), psnr: m.psnr_db, ssim: m.ssim });
        }
    }
    let items = select_items(&manifest, parse_split(&s.split)?, s.ev, s.zoom);
    if s.baseline {
        for it in &items {
            let gt = target(&it.scene_id)?;
            let base = exposure_baseline(&load_raw(&root, &it.entry)?, it.entry.ev, &manifest.synth)?;
            let base = if base.hw() == gt.hw() { base } else { bicubic_resize(&base, gt.hw()) };
            let m = evaluate(&base.map(|v| quantize(v, SRGB_BITS)), &gt)?;
            rows.push(EvalRow {
                scene_id: it.scene_id.clone(),
                ev: it.entry.ev,
                iso: it.entry.iso,
                zoom: s.zoom,
                method: BASELINE_METHOD.into(),
                psnr: m.psnr_db,
                ssim: m.ssim,
            });
        }
    }
    if s.sanity {
        for it in &items {
            let gt = target(&it.scene_id)?;
            let m = evaluate(&gt, &gt)?;
            let (scene_id, ev, iso) = (it.scene_id.clone(), it.entry.ev, it.entry.iso);
            rows.push(EvalRow { scene_id, ev, iso, zoom: s.zoom, method: "ground_truth".into(), psnr: m.psnr_db, ssim: m.ssim });
        }
    }

    let mut csv = String::from("scene_id,ev,iso,zoom,method,psnr,ssim\n");
    for r in &rows {
        csv += &format!("{},{},{},{},{},{},{}\n", r.scene_id, r.ev, r.iso, r.zoom, r.method, r.psnr, r.ssim);
    }
    let path = s.out.join("eval.csv");
    write_text(&path, &csv)?;
    Ok(EvalOutput { csv: path, summary: summarize(&rows), rows })
}
