//! Degradation statistics: per-EV quality, intensity moments and gradient
//! histograms. The noise model behind synthetic data is a shot + read proxy,
//! so these numbers describe the proxy, not real sensor noise.

use std::collections::BTreeMap;
use std::path::Path;

use super::manifest::{load_srgb, DatasetManifest, Split};
use crate::error::{Error, Result};
use crate::image::ImagePlanes;
use crate::metrics::{luma, psnr_y, ssim_y};

/// Forward differences in x and y pooled over every plane, binned on
/// `[-1, 1]` and normalized to unit mass.
pub fn gradient_histogram(image: &ImagePlanes, bins: usize) -> Result<Vec<f64>> {
    if bins < 2 {
        return Err(Error::OutOfRange { what: "bins", detail: format!("{bins} < 2") });
    }
    let [n, c, h, w] = image.shape();
    let mut hist = vec![0.0; bins];
    let mut push = |g: f64| {
        let b = ((g.clamp(-1.0, 1.0) + 1.0) / 2.0 * bins as f64).floor() as usize;
        hist[b.min(bins - 1)] += 1.0;
    };
    for b in 0..n {
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let v = image.get(b, ch, y, x);
                    if x + 1 < w {
                        push(image.get(b, ch, y, x + 1) - v);
                    }
                    if y + 1 < h {
                        push(image.get(b, ch, y + 1, x) - v);
                    }
                }
            }
        }
    }
    let total: f64 = hist.iter().sum();
    if total > 0.0 {
        hist.iter_mut().for_each(|v| *v /= total);
    }
    Ok(hist)
}

/// Standard deviation of a histogram over `[-1, 1]` using bin centers.
pub fn histogram_std(hist: &[f64]) -> f64 {
    let bins = hist.len() as f64;
    let center = |i: usize| -1.0 + (2.0 * i as f64 + 1.0) / bins;
    let mean: f64 = hist.iter().enumerate().map(|(i, p)| p * center(i)).sum();
    hist.iter().enumerate().map(|(i, p)| p * (center(i) - mean).powi(2)).sum::<f64>().sqrt()
}

#[derive(Clone, Debug, PartialEq)]
pub struct DegradationRow {
    pub ev: f64,
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StatsRow {
    pub ev: f64,
    /// Pixel mean on the 0-255 scale.
    pub mu: f64,
    /// Population standard deviation on the 0-255 scale.
    pub sigma: f64,
}

fn ev_key(ev: f64) -> i64 {
    -(ev * 1000.0).round() as i64
}

/// Mean PSNR-Y / SSIM-Y per EV, brightest level first.
pub fn degradation_rows(pairs: &[(f64, ImagePlanes, ImagePlanes)]) -> Result<Vec<DegradationRow>> {
    let mut groups: BTreeMap<i64, (f64, Vec<(f64, f64)>)> = BTreeMap::new();
    for (ev, degraded, gt) in pairs {
        let m = (psnr_y(degraded, gt)?, ssim_y(degraded, gt)?);
        groups.entry(ev_key(*ev)).or_insert((*ev, Vec::new())).1.push(m);
    }
    Ok(groups
        .into_values()
        .map(|(ev, v)| {
            let n = v.len() as f64;
            DegradationRow { ev, psnr: v.iter().map(|m| m.0).sum::<f64>() / n, ssim: v.iter().map(|m| m.1).sum::<f64>() / n }
        })
        .collect())
}

/// Pooled luma moments per EV on the 0-255 scale.
pub fn stats_rows(images: &[(f64, ImagePlanes)]) -> Result<Vec<StatsRow>> {
    let mut groups: BTreeMap<i64, (f64, Vec<f64>)> = BTreeMap::new();
    for (ev, img) in images {
        let y = luma(img)?;
        groups.entry(ev_key(*ev)).or_insert((*ev, Vec::new())).1.extend(y.data().iter().map(|v| v * 255.0));
    }
    Ok(groups
        .into_values()
        .map(|(ev, v)| {
            let n = v.len() as f64;
            let mu = v.iter().sum::<f64>() / n;
            let sigma = (v.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / n).sqrt();
            StatsRow { ev, mu, sigma }
        })
        .collect())
}

#[derive(Clone, Debug, Default)]
pub struct Report<R> {
    pub rows: Vec<R>,
    /// `scene_id: reason` for scenes that could not be paired.
    pub missing: Vec<String>,
}

type Pairs = (Vec<(f64, ImagePlanes, ImagePlanes)>, Vec<String>);

fn collect_pairs(manifest: &DatasetManifest, root: &Path, split: Option<Split>) -> Result<Pairs> {
    let mut pairs = Vec::new();
    let mut missing = Vec::new();
    for rec in manifest.records.iter().filter(|r| split.map_or(true, |s| r.split == s)) {
        let Some(gt) = rec.ground_truth_at(1) else {
            missing.push(format!("{}: no x1 ground truth", rec.scene_id));
            continue;
        };
        let gt = match load_srgb(root, &gt.srgb_path) {
            Ok(img) => img,
            Err(e) => {
                missing.push(format!("{}: {e}", rec.scene_id));
                continue;
            }
        };
        for e in &rec.low_light {
            match load_srgb(root, &e.srgb_path) {
                Ok(img) if img.shape() == gt.shape() => pairs.push((e.ev, img, gt.clone())),
                Ok(img) => missing.push(format!("{}: ev {} shape {:?} vs {:?}", rec.scene_id, e.ev, img.shape(), gt.shape())),
                Err(err) => missing.push(format!("{}: {err}", rec.scene_id)),
            }
        }
    }
    Ok((pairs, missing))
}

pub fn degradation_report(manifest: &DatasetManifest, root: &Path, split: Option<Split>) -> Result<Report<DegradationRow>> {
    let (pairs, missing) = collect_pairs(manifest, root, split)?;
    Ok(Report { rows: degradation_rows(&pairs)?, missing })
}

pub fn stats_mu_sigma(manifest: &DatasetManifest, root: &Path, split: Option<Split>) -> Result<Report<StatsRow>> {
    let (pairs, missing) = collect_pairs(manifest, root, split)?;
    let images: Vec<_> = pairs.into_iter().map(|(ev, img, _)| (ev, img)).collect();
    Ok(Report { rows: stats_rows(&images)?, missing })
}

pub fn degradation_csv(rows: &[DegradationRow]) -> String {
    let mut s = String::from("ev,psnr,ssim\n");
    for r in rows {
        s += &format!("{},{},{}\n", r.ev, r.psnr, r.ssim);
    }
    s
}

pub fn stats_csv(rows: &[StatsRow]) -> String {
    let mut s = String::from("ev,mu,sigma\n");
    for r in rows {
        s += &format!("{},{},{}\n", r.ev, r.mu, r.sigma);
    }
    s
}
