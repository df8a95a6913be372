//! Minimal RIFF/WAVE io: 16-bit PCM, mono, little-endian.
//!
//! Hand-rolled so output bytes are fully under our control; pipeline
//! determinism is checked at the byte level.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::codec::Waveform;
use crate::{Error, Result};

/// Write a waveform as 16-bit PCM mono. Samples are clamped to `[−1, 1]`
/// and rounded half away from zero.
pub fn write_wav(path: &Path, w: &Waveform) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    let data_len = (w.len() * 2) as u32;
    out.write_all(b"RIFF")?;
    out.write_all(&(36 + data_len).to_le_bytes())?;
    out.write_all(b"WAVE")?;
    out.write_all(b"fmt ")?;
    out.write_all(&16u32.to_le_bytes())?;
    out.write_all(&1u16.to_le_bytes())?; // PCM
    out.write_all(&1u16.to_le_bytes())?; // mono
    out.write_all(&w.sample_rate.to_le_bytes())?;
    out.write_all(&(w.sample_rate * 2).to_le_bytes())?; // byte rate
    out.write_all(&2u16.to_le_bytes())?; // block align
    out.write_all(&16u16.to_le_bytes())?; // bits per sample
    out.write_all(b"data")?;
    out.write_all(&data_len.to_le_bytes())?;
    for &s in &w.samples {
        let v = (s.clamp(-1.0, 1.0) * 32767.0).round() as i16;
        out.write_all(&v.to_le_bytes())?;
    }
    out.flush()?;
    Ok(())
}

/// Read a 16-bit PCM mono WAV file.
pub fn read_wav(path: &Path) -> Result<Waveform> {
    let mut r = BufReader::new(File::open(path)?);
    let mut hdr = [0u8; 12];
    r.read_exact(&mut hdr)?;
    if &hdr[0..4] != b"RIFF" || &hdr[8..12] != b"WAVE" {
        return Err(Error::Format(format!(
            "{}: not a RIFF/WAVE file",
            path.display()
        )));
    }
    let mut sample_rate = 0u32;
    let mut bits = 0u16;
    let mut channels = 0u16;
    loop {
        let mut chunk = [0u8; 8];
        if r.read_exact(&mut chunk).is_err() {
            return Err(Error::Format(format!("{}: no data chunk", path.display())));
        }
        let size = u32::from_le_bytes(chunk[4..8].try_into().unwrap()) as usize;
        match &chunk[0..4] {
            b"fmt " => {
                let mut fmt = vec![0u8; size];
                r.read_exact(&mut fmt)?;
                let format = u16::from_le_bytes(fmt[0..2].try_into().unwrap());
                channels = u16::from_le_bytes(fmt[2..4].try_into().unwrap());
                sample_rate = u32::from_le_bytes(fmt[4..8].try_into().unwrap());
                bits = u16::from_le_bytes(fmt[14..16].try_into().unwrap());
                if format != 1 {
                    return Err(Error::Format(format!(
                        "{}: compression format {format} unsupported (want PCM)",
                        path.display()
                    )));
                }
            }
            b"data" => {
                if channels != 1 || bits != 16 {
                    return Err(Error::Format(format!(
                        "{}: want 16-bit mono, got {bits}-bit {channels}-channel",
                        path.display()
                    )));
                }
                let mut data = vec![0u8; size];
                r.read_exact(&mut data)?;
                let samples: Vec<f64> = data
                    .chunks_exact(2)
                    .map(|b| i16::from_le_bytes([b[0], b[1]]) as f64 / 32767.0)
                    .collect();
                return Waveform::new(samples, sample_rate);
            }
            _ => {
                // Skip unknown chunks (word-aligned).
                let skip = size + (size & 1);
                let mut sink = vec![0u8; skip];
                r.read_exact(&mut sink)?;
            }
        }
    }
}
