//! Core library for discrete-diffusion speech bandwidth extension over
//! codec tokens.
//!
//! The pieces, bottom to top:
//!
//! - [`schedule`]: mask-and-uniform corruption schedules and their
//!   (cumulative) transition matrices in a closed three-coefficient form.
//! - [`d3pm`]: the discrete diffusion process over token grids — forward
//!   corruption, analytic posterior, reverse-step mixture, ancestral
//!   sampling and the variational training loss.
//! - [`codec`]: an invertible MDCT + residual-VQ tokenizer standing in for
//!   a learned neural codec.
//! - [`nn`]: the conditional denoiser (timestep AdaLN, bidirectional
//!   SSD-scan blocks, CLS-token condition encoder) on a minimal f64
//!   reverse-mode tape, plus Adam training and a tabular oracle denoiser.
//! - [`dsp`]: brickwall low-pass corruption, STFT magnitudes and the
//!   log-spectral distance metric.
//! - [`io`]: WAV and binary artifact formats.

pub mod codec;
pub mod d3pm;
pub mod dsp;
pub mod io;
pub mod nn;
pub mod rng;
pub mod schedule;

#[cfg(test)]
pub(crate) mod testutil;

use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid schedule: {0}")]
    Schedule(String),
    #[error("invalid token grid: {0}")]
    Grid(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("codec error: {0}")]
    Codec(String),
    #[error("dsp error: {0}")]
    Dsp(String),
    #[error("model error: {0}")]
    Model(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad file format: {0}")]
    Format(String),
}

pub type Result<T> = std::result::Result<T, Error>;
