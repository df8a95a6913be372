//! Signal corruption and spectral evaluation: brickwall low-pass,
//! STFT magnitudes, and the log-spectral distance.

use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

use crate::codec::Waveform;
use crate::{Error, Result};

/// STFT configuration used by the LSD metric. The values travel with
/// evaluation reports so results stay comparable.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LsdConfig {
    pub fft_size: usize,
    pub hop: usize,
    /// Magnitudes are floored here before taking log10.
    pub floor: f64,
}

impl Default for LsdConfig {
    fn default() -> Self {
        Self {
            fft_size: 2048,
            hop: 512,
            floor: 1e-8,
        }
    }
}

/// Magnitude spectrogram, `frames × bins` with `bins = fft_size/2 + 1`.
#[derive(Debug, Clone)]
pub struct Spectrogram {
    pub frames: usize,
    pub bins: usize,
    pub mags: Vec<f64>,
}

impl Spectrogram {
    pub fn row(&self, frame: usize) -> &[f64] {
        &self.mags[frame * self.bins..(frame + 1) * self.bins]
    }
}

/// Zero every DFT bin strictly above `cutoff_hz` and invert. Output has
/// the same length and sample rate.
pub fn lowpass(w: &Waveform, cutoff_hz: f64) -> Result<Waveform> {
    let nyquist = w.sample_rate as f64 / 2.0;
    if !(cutoff_hz > 0.0 && cutoff_hz < nyquist) {
        return Err(Error::Dsp(format!(
            "cutoff {cutoff_hz} Hz outside (0, {nyquist})"
        )));
    }
    if w.is_empty() {
        return Err(Error::Dsp("empty signal".into()));
    }
    let n = w.len();
    let mut planner = FftPlanner::new();
    let fwd = planner.plan_fft_forward(n);
    let inv = planner.plan_fft_inverse(n);
    let mut buf: Vec<Complex64> = w.samples.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    fwd.process(&mut buf);
    let bin_hz = w.sample_rate as f64 / n as f64;
    for (k, v) in buf.iter_mut().enumerate() {
        let freq = k.min(n - k) as f64 * bin_hz;
        if freq > cutoff_hz {
            *v = Complex64::new(0.0, 0.0);
        }
    }
    inv.process(&mut buf);
    let scale = 1.0 / n as f64;
    Waveform::new(buf.iter().map(|c| c.re * scale).collect(), w.sample_rate)
}

/// Fraction of signal energy strictly above `cutoff_hz` (DFT measurement).
pub fn energy_fraction_above(w: &Waveform, cutoff_hz: f64) -> f64 {
    let n = w.len();
    let mut planner = FftPlanner::new();
    let fwd = planner.plan_fft_forward(n);
    let mut buf: Vec<Complex64> = w.samples.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    fwd.process(&mut buf);
    let bin_hz = w.sample_rate as f64 / n as f64;
    let mut above = 0.0;
    let mut total = 0.0;
    for (k, v) in buf.iter().enumerate() {
        let e = v.norm_sqr();
        total += e;
        if k.min(n - k) as f64 * bin_hz > cutoff_hz {
            above += e;
        }
    }
    if total > 0.0 {
        above / total
    } else {
        0.0
    }
}

/// Hann-windowed magnitude STFT. Frames start at multiples of `hop` and
/// must fit entirely inside the signal.
pub fn stft_magnitude(w: &Waveform, fft_size: usize, hop: usize) -> Result<Spectrogram> {
    if w.is_empty() {
        return Err(Error::Dsp("empty signal".into()));
    }
    if !fft_size.is_power_of_two() {
        return Err(Error::Dsp(format!(
            "fft_size {fft_size} must be a power of two"
        )));
    }
    if hop == 0 {
        return Err(Error::Dsp("hop must be positive".into()));
    }
    if w.len() < fft_size {
        return Err(Error::Dsp(format!(
            "signal of {} samples shorter than fft_size {fft_size}",
            w.len()
        )));
    }
    let window: Vec<f64> = (0..fft_size)
        .map(|n| 0.5 * (1.0 - (2.0 * std::f64::consts::PI * n as f64 / fft_size as f64).cos()))
        .collect();
    let frames = (w.len() - fft_size) / hop + 1;
    let bins = fft_size / 2 + 1;
    let mut planner = FftPlanner::new();
    let fft = planner.plan_fft_forward(fft_size);
    let mut mags = Vec::with_capacity(frames * bins);
    let mut buf = vec![Complex64::new(0.0, 0.0); fft_size];
    for f in 0..frames {
        let start = f * hop;
        for (n, b) in buf.iter_mut().enumerate() {
            *b = Complex64::new(w.samples[start + n] * window[n], 0.0);
        }
        fft.process(&mut buf);
        mags.extend(buf[..bins].iter().map(|c| c.norm()));
    }
    Ok(Spectrogram { frames, bins, mags })
}

/// Log-spectral distance between two equal-length waveforms.
///
/// Per frame: the root of the mean over bins of squared log10-magnitude
/// differences; then averaged over frames. Magnitudes are floored before
/// the log so silence stays finite.
pub fn lsd(reference: &Waveform, estimate: &Waveform) -> Result<f64> {
    lsd_with(reference, estimate, &LsdConfig::default())
}

pub fn lsd_with(reference: &Waveform, estimate: &Waveform, cfg: &LsdConfig) -> Result<f64> {
    if reference.len() != estimate.len() {
        return Err(Error::Shape(format!(
            "length mismatch: {} vs {}",
            reference.len(),
            estimate.len()
        )));
    }
    if reference.sample_rate != estimate.sample_rate {
        return Err(Error::Shape("sample-rate mismatch".into()));
    }
    let s_ref = stft_magnitude(reference, cfg.fft_size, cfg.hop)?;
    let s_est = stft_magnitude(estimate, cfg.fft_size, cfg.hop)?;
    let mut frame_sum = 0.0;
    for f in 0..s_ref.frames {
        let (r, e) = (s_ref.row(f), s_est.row(f));
        let mut acc = 0.0;
        for (&a, &b) in r.iter().zip(e) {
            let d = (a.max(cfg.floor)).log10() - (b.max(cfg.floor)).log10();
            acc += d * d;
        }
        frame_sum += (acc / s_ref.bins as f64).sqrt();
    }
    Ok(frame_sum / s_ref.frames as f64)
}
