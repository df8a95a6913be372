//! Pipeline orchestration: synthetic corpus generation, codec and
//! denoiser training, bandwidth-extension inference, and evaluation —
//! all config-driven and deterministic per seed.

pub mod config;
pub mod eval;
pub mod infer;
pub mod report;
pub mod synth;
pub mod train;

pub use config::RunConfig;
