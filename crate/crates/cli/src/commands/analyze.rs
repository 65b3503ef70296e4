use std::collections::BTreeMap;
use std::path::PathBuf;

use tmcdiff::data::analysis::{degradation_csv, degradation_report, gradient_histogram, stats_csv, stats_mu_sigma};
use tmcdiff::data::manifest::load_srgb;
use tmcdiff::Result;

use super::{open_manifest, parse_split, write_text};
use crate::config::{archive, settings};

settings!(
    /// Per-EV degradation tables and gradient histograms.
    AnalyzeSettings, "analyze" {
        out: PathBuf = PathBuf::from("runs/analyze"),
        manifest: PathBuf = PathBuf::from("data/manifest.json"),
        split: String = "all".into(),
        bins: usize = 64,
    }
);

pub struct AnalyzeOutput {
    pub degradation_csv: PathBuf,
    pub stats_csv: PathBuf,
    pub histogram_csv: PathBuf,
    pub missing: Vec<String>,
}

pub fn cmd_analyze(s: &AnalyzeSettings) -> Result<AnalyzeOutput> {
    let (manifest, root) = open_manifest(&s.manifest)?;
    let split = parse_split(&s.split)?;
    archive(s)?;
    let deg = degradation_report(&manifest, &root, split)?;
    let stats = stats_mu_sigma(&manifest, &root, split)?;

    // Mean histogram per source: each EV level and the x1 ground truth.
    let mut hists: BTreeMap<(i64, String), (Vec<f64>, usize)> = BTreeMap::new();
    let mut add = |key: (i64, String), h: Vec<f64>| {
        let e = hists.entry(key).or_insert_with(|| (vec![0.0; h.len()], 0));
        e.0.iter_mut().zip(&h).for_each(|(a, b)| *a += b);
        e.1 += 1;
    };
    for rec in manifest.records.iter().filter(|r| split.map_or(true, |sp| r.split == sp)) {
        for e in &rec.low_light {
            let img = load_srgb(&root, &e.srgb_path)?;
            add((-(e.ev * 1000.0).round() as i64, format!("ev{}", e.ev)), gradient_histogram(&img, s.bins)?);
        }
        if let Some(gt) = rec.ground_truth_at(1) {
            add((i64::MIN, "gt".into()), gradient_histogram(&load_srgb(&root, &gt.srgb_path)?, s.bins)?);
        }
    }
    let mut hist_csv = String::from("source,bin,center,density\n");
    for ((_, name), (sum, n)) in &hists {
        for (b, v) in sum.iter().enumerate() {
            let center = -1.0 + (2.0 * b as f64 + 1.0) / s.bins as f64;
            hist_csv += &format!("{name},{b},{center},{}\n", v / *n as f64);
        }
    }

    let out = AnalyzeOutput {
        degradation_csv: s.out.join("degradation.csv"),
        stats_csv: s.out.join("stats_mu_sigma.csv"),
        histogram_csv: s.out.join("gradient_histogram.csv"),
        missing: deg.missing.clone(),
    };
    write_text(&out.degradation_csv, &degradation_csv(&deg.rows))?;
    write_text(&out.stats_csv, &stats_csv(&stats.rows))?;
    write_text(&out.histogram_csv, &hist_csv)?;
    if !out.missing.is_empty() {
        write_text(&s.out.join("missing.txt"), &(out.missing.join("\n") + "\n"))?;
    }
    Ok(out)
}
