//! Invertible toy codec: MDCT framing plus residual vector quantization.
//!
//! The MDCT replaces a learned convolutional encoder so that codec error
//! is attributable solely to quantization. Analysis, quantization and
//! synthesis are all deterministic.

pub mod mdct;
pub mod rvq;

pub use mdct::{frame_count, imdct, mdct, FrameMatrix};
pub use rvq::{train_rvq, CodebookSet};

use crate::d3pm::TokenGrid;
use crate::{Error, Result};

/// Mono waveform with amplitudes nominally in `[−1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::Domain("sample_rate must be positive".into()));
        }
        if samples.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("non-finite sample".into()));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

/// Tokenize a waveform: MDCT analysis followed by residual quantization.
pub fn encode(w: &Waveform, cb: &CodebookSet) -> Result<TokenGrid> {
    let frames = mdct(&w.samples, cb.window_len())?;
    cb.encode_frames(&frames)
}

/// Reconstruct a waveform from tokens: stage-vector sums through the
/// inverse MDCT. Rejects grids containing `MASK`.
pub fn decode(grid: &TokenGrid, cb: &CodebookSet, sample_rate: u32) -> Result<Waveform> {
    let frames = cb.decode_frames(grid)?;
    let samples = imdct(&frames, cb.window_len())?;
    Waveform::new(samples, sample_rate)
}
