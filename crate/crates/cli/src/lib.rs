//! Library surface of the `koopman` CLI: experiment configs, pipeline
//! stages, presets, and on-disk artifact formats.

pub mod artifacts;
pub mod config;
pub mod pipeline;
pub mod presets;
