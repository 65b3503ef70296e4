//! Synthetic paired data and the burst-to-ground-truth tooling.

pub mod align;
pub mod analysis;
pub mod corpus;
pub mod isp;
pub mod manifest;
pub mod noise;
pub mod robust;
pub mod synth;

pub use align::{spatial_align, AlignMethod, AlignOutcome, Similarity};
pub use manifest::{DatasetManifest, SceneRecord, Split};
pub use noise::NoiseModel;
pub use synth::{synth_scene, SynthParams, SynthScene};
