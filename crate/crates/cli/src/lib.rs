//! Batch entry points: `synth`, `train`, `sample`, `eval` and `analyze`.
//!
//! Each command reads a settings struct (see [`config`]), archives the
//! resolved settings in its output directory and writes CSV / PNG artifacts.

pub mod commands;
pub mod config;

pub use commands::analyze::{cmd_analyze, AnalyzeSettings};
pub use commands::eval::{cmd_eval, EvalSettings};
pub use commands::sample::{cmd_sample, SampleSettings};
pub use commands::synth::{cmd_synth, SynthSettings};
pub use commands::train::{cmd_train, TrainSettings};
