//! Experiment configuration, synthetic score generation and the staged
//! pipeline behind the CLI.

pub mod config;
pub mod pipeline;
pub mod synth;

pub use config::ExperimentConfig;
pub use pipeline::{external_conformal, run_pipeline, Run, STAGES};
pub use synth::gen_synth_scores;
