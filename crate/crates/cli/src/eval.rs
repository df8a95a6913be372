//! Evaluation: pair reference and estimate WAVs, compute LSD (optionally
//! against the low-res inputs too), shell out to ViSQOL when configured.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use anyhow::{bail, Context, Result};
use vqbwe_core::dsp::{self, LsdConfig};
use vqbwe_core::io::read_wav;

use crate::config::RunConfig;
use crate::infer::read_run_meta_hash;
use crate::report::{EvalReport, UtteranceRow};
use crate::synth::read_meta_hash;

pub const REPORT_FILE: &str = "report.jsonl";

/// Env var naming an external ViSQOL executable; when unset the column is
/// omitted.
pub const VISQOL_ENV: &str = "VISQOL_BIN";

fn wav_names(dir: &Path) -> Result<Vec<String>> {
    let mut names: Vec<String> = fs::read_dir(dir)
        .with_context(|| format!("listing {}", dir.display()))?
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n.ends_with(".wav"))
        .collect();
    names.sort();
    Ok(names)
}

/// Parse the last floating-point token from ViSQOL's stdout (the MOS-LQO).
fn parse_visqol_output(stdout: &str) -> Option<f64> {
    stdout
        .split_whitespace()
        .filter_map(|tok| tok.trim_end_matches(',').parse::<f64>().ok())
        .next_back()
}

fn run_visqol(bin: &str, reference: &Path, degraded: &Path) -> Result<f64> {
    let out = Command::new(bin)
        .arg("--reference_file")
        .arg(reference)
        .arg("--degraded_file")
        .arg(degraded)
        .output()
        .with_context(|| format!("running ViSQOL binary {bin}"))?;
    if !out.status.success() {
        bail!("ViSQOL exited with {}", out.status);
    }
    let text = String::from_utf8_lossy(&out.stdout);
    parse_visqol_output(&text)
        .ok_or_else(|| anyhow::anyhow!("could not parse a score from ViSQOL output"))
}

/// Compare an estimate directory against a reference directory. With
/// `input_dir`, input-vs-reference LSD columns are included. Unpaired
/// files are listed and skipped.
pub fn cmd_eval(
    cfg: &RunConfig,
    reference_dir: &Path,
    estimate_dir: &Path,
    input_dir: Option<&Path>,
    out_dir: &Path,
) -> Result<(EvalReport, PathBuf)> {
    cfg.validate()?;
    // Refuse mismatched artifact pairs when both sides carry hashes.
    let ref_hash = read_meta_hash(reference_dir);
    let est_hash = read_run_meta_hash(estimate_dir).or_else(|| read_meta_hash(estimate_dir));
    if let (Some(a), Some(b)) = (&ref_hash, &est_hash) {
        if a != b {
            bail!("reference dir hash {a} does not match estimate dir hash {b}");
        }
    }
    if let Some(h) = &ref_hash {
        if h != &cfg.hash_hex() {
            bail!(
                "reference dir hash {h} does not match current config {}",
                cfg.hash_hex()
            );
        }
    }

    let ref_names = wav_names(reference_dir)?;
    let est_names = wav_names(estimate_dir)?;
    let lsd_cfg = LsdConfig {
        fft_size: cfg.eval_fft_size,
        hop: cfg.eval_hop,
        ..LsdConfig::default()
    };
    let visqol_bin = std::env::var(VISQOL_ENV).ok();

    let mut rows = Vec::new();
    let mut unpaired: Vec<String> = Vec::new();
    for name in &ref_names {
        if !est_names.contains(name) {
            unpaired.push(name.clone());
            continue;
        }
        let reference = read_wav(&reference_dir.join(name)).map_err(|e| anyhow::anyhow!("{e}"))?;
        let estimate = read_wav(&estimate_dir.join(name)).map_err(|e| anyhow::anyhow!("{e}"))?;
        let lsd_out =
            dsp::lsd_with(&reference, &estimate, &lsd_cfg).map_err(|e| anyhow::anyhow!("{e}"))?;
        let lsd_in = match input_dir {
            Some(dir) => {
                let input = read_wav(&dir.join(name)).map_err(|e| anyhow::anyhow!("{e}"))?;
                Some(
                    dsp::lsd_with(&reference, &input, &lsd_cfg)
                        .map_err(|e| anyhow::anyhow!("{e}"))?,
                )
            }
            None => None,
        };
        let visqol_out = match &visqol_bin {
            Some(bin) => Some(run_visqol(
                bin,
                &reference_dir.join(name),
                &estimate_dir.join(name),
            )?),
            None => None,
        };
        rows.push(UtteranceRow {
            utt: name.clone(),
            lsd_out,
            lsd_in,
            visqol_out,
        });
    }
    for name in &est_names {
        if !ref_names.contains(name) {
            unpaired.push(name.clone());
        }
    }
    unpaired.sort();
    if rows.is_empty() {
        bail!("no paired utterances between the two directories");
    }
    let report = EvalReport {
        config_hash: cfg.hash_hex(),
        fft_size: cfg.eval_fft_size,
        hop: cfg.eval_hop,
        floor: lsd_cfg.floor,
        rows,
        unpaired,
    };
    fs::create_dir_all(out_dir)?;
    let path = out_dir.join(REPORT_FILE);
    fs::write(&path, report.to_jsonl())?;
    Ok((report, path))
}
