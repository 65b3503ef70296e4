pub mod analyze;
pub mod eval;
pub mod sample;
pub mod synth;
pub mod train;

use std::path::{Path, PathBuf};

use tmcdiff::condition::pack_bayer;
use tmcdiff::data::manifest::{load_raw, load_srgb, GroundTruthEntry, LowLightEntry};
use tmcdiff::data::{DatasetManifest, Split};
use tmcdiff::{Error, ImagePlanes, Result};

pub(crate) fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io { path: path.to_path_buf(), source }
}

pub(crate) fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(io_err(path))
}

/// Manifest plus the directory its relative paths resolve against.
pub(crate) fn open_manifest(path: &Path) -> Result<(DatasetManifest, PathBuf)> {
    let manifest = DatasetManifest::load(path)?;
    let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok((manifest, root))
}

pub(crate) fn parse_split(s: &str) -> Result<Option<Split>> {
    if s == "all" { Ok(None) } else { s.parse().map(Some) }
}

/// One low-light capture and its target at the requested zoom.
#[derive(Clone, Debug)]
pub(crate) struct Item {
    pub scene_id: String,
    pub entry: LowLightEntry,
    pub target: Option<GroundTruthEntry>,
}

pub(crate) fn select_items(manifest: &DatasetManifest, split: Option<Split>, ev: Option<f64>, zoom: usize) -> Vec<Item> {
    manifest
        .records
        .iter()
        .filter(|r| split.map_or(true, |s| r.split == s))
        .flat_map(|r| {
            r.low_light.iter().filter(move |e| ev.map_or(true, |v| (e.ev - v).abs() < 1e-9)).map(move |e| Item {
                scene_id: r.scene_id.clone(),
                entry: e.clone(),
                target: r.ground_truth_at(zoom).cloned(),
            })
        })
        .collect()
}

/// Condition-path input for a capture: the display image or the packed mosaic.
pub(crate) fn condition_input(root: &Path, entry: &LowLightEntry, condition: &str) -> Result<ImagePlanes> {
    match condition {
        "raw" => Ok(pack_bayer(&load_raw(root, entry)?)),
        _ => load_srgb(root, &entry.srgb_path),
    }
}

pub(crate) fn item_stem(item: &Item) -> String {
    format!("{}_ev{:+.1}", item.scene_id, item.entry.ev)
}
