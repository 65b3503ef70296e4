//! Dataset manifest: scene records with relative asset paths.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::isp::RAW_BITS;
use super::synth::{scene_rng, synth_scene, SynthParams, SynthScene};
use crate::condition::RawFrame;
use crate::error::{Error, Result};
use crate::image::ImagePlanes;
use crate::io::{read_png, read_raw16, write_png, write_raw16};

pub const MANIFEST_VERSION: u32 = 1;
pub const RAW_WHITE_LEVEL: u16 = (1 << RAW_BITS) - 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(Error::Config(format!("unknown split `{s}` (train, val, test)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RawInfo {
    pub height: usize,
    pub width: usize,
    pub bit_depth: u32,
    pub black_level: u16,
    pub white_level: u16,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LowLightEntry {
    pub ev: f64,
    pub iso: u32,
    pub raw_path: PathBuf,
    pub srgb_path: PathBuf,
    pub raw: RawInfo,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthEntry {
    pub zoom: usize,
    pub srgb_path: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneRecord {
    pub scene_id: String,
    pub split: Split,
    pub low_light: Vec<LowLightEntry>,
    pub ground_truth: Vec<GroundTruthEntry>,
}

impl SceneRecord {
    pub fn ground_truth_at(&self, zoom: usize) -> Option<&GroundTruthEntry> {
        self.ground_truth.iter().find(|g| g.zoom == zoom)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub seed: u64,
    pub synth: SynthParams,
    pub records: Vec<SceneRecord>,
}

impl DatasetManifest {
    pub fn validate(&self) -> Result<()> {
        if self.format_version != MANIFEST_VERSION {
            return Err(Error::Config(format!("manifest version {} (expected {MANIFEST_VERSION})", self.format_version)));
        }
        let mut seen = HashSet::new();
        for r in &self.records {
            if !seen.insert(r.scene_id.as_str()) {
                return Err(Error::Config(format!("duplicate scene id `{}`", r.scene_id)));
            }
            if r.low_light.is_empty() || r.ground_truth.is_empty() {
                return Err(Error::Config(format!("scene `{}` lacks inputs or targets", r.scene_id)));
            }
            let paths = r.low_light.iter().flat_map(|e| [&e.raw_path, &e.srgb_path]).chain(r.ground_truth.iter().map(|g| &g.srgb_path));
            if let Some(p) = paths.into_iter().find(|p| p.is_absolute()) {
                return Err(Error::Config(format!("absolute asset path {}", p.display())));
            }
        }
        Ok(())
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &SceneRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::format(path, e.to_string()))?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: Self = serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
        m.validate()?;
        Ok(m)
    }
}

pub fn load_raw(root: &Path, entry: &LowLightEntry) -> Result<RawFrame> {
    let i = &entry.raw;
    read_raw16(&root.join(&entry.raw_path), i.height, i.width, i.black_level, i.white_level)
}

pub fn load_srgb(root: &Path, rel: &Path) -> Result<ImagePlanes> {
    read_png(&root.join(rel))
}

/// Writes one scene's assets under `root/scenes/<id>/` and returns its record.
pub fn write_scene(root: &Path, scene_id: &str, split: Split, scene: &SynthScene) -> Result<SceneRecord> {
    let rel = PathBuf::from("scenes").join(scene_id);
    let dir = root.join(&rel);
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut low_light = Vec::new();
    for c in &scene.low_light {
        let stem = format!("ev{:+.1}_iso{}", c.ev, c.iso);
        let (raw_path, srgb_path) = (rel.join(format!("{stem}.raw16")), rel.join(format!("{stem}.png")));
        write_raw16(&root.join(&raw_path), &c.raw, RAW_WHITE_LEVEL)?;
        write_png(&root.join(&srgb_path), &c.srgb)?;
        let raw = RawInfo { height: c.raw.height(), width: c.raw.width(), bit_depth: RAW_BITS, black_level: 0, white_level: RAW_WHITE_LEVEL };
        low_light.push(LowLightEntry { ev: c.ev, iso: c.iso, raw_path, srgb_path, raw });
    }
    let mut ground_truth = Vec::new();
    for g in &scene.ground_truth {
        let srgb_path = rel.join(format!("gt_x{}.png", g.zoom));
        write_png(&root.join(&srgb_path), &g.srgb)?;
        ground_truth.push(GroundTruthEntry { zoom: g.zoom, srgb_path });
    }
    Ok(SceneRecord { scene_id: scene_id.to_string(), split, low_light, ground_truth })
}

/// Last `test` scenes go to test, the `val` before them to validation.
pub fn assign_split(index: usize, total: usize, val: usize, test: usize) -> Split {
    if index + test >= total {
        Split::Test
    } else if index + test + val >= total {
        Split::Val
    } else {
        Split::Train
    }
}

pub fn scene_id(index: usize) -> String {
    format!("scene_{index:04}")
}

/// Synthesizes every source image and writes the assets plus `manifest.json`.
pub fn synthesize_dataset(root: &Path, sources: &[ImagePlanes], params: &SynthParams, seed: u64, val: usize, test: usize) -> Result<DatasetManifest> {
    if sources.is_empty() {
        return Err(Error::Input("no source images".into()));
    }
    if val + test > sources.len() {
        return Err(Error::Config(format!("{val} val + {test} test scenes exceed {} sources", sources.len())));
    }
    params.validate()?;
    std::fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let mut records = Vec::with_capacity(sources.len());
    for (i, src) in sources.iter().enumerate() {
        let scene = synth_scene(src, params, &mut scene_rng(seed, i as u64))?;
        records.push(write_scene(root, &scene_id(i), assign_split(i, sources.len(), val, test), &scene)?);
    }
    let manifest = DatasetManifest { format_version: MANIFEST_VERSION, seed, synth: params.clone(), records };
    manifest.validate()?;
    manifest.save(&root.join("manifest.json"))?;
    Ok(manifest)
}
