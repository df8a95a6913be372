//! Bandwidth-extension inference: encode the low-resolution input,
//! condition the denoiser on it, walk the reverse chain, decode.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use vqbwe_core::codec::{self, CodebookSet, Waveform};
use vqbwe_core::d3pm;
use vqbwe_core::io::{read_wav, write_wav};
use vqbwe_core::nn::DenoiserModel;
use vqbwe_core::rng;

use crate::config::RunConfig;
use crate::train::{load_checkpoint_parts, model_config, schedule, CODEBOOK_FILE, MODEL_FILE};

/// Load the trained model + codebooks from a training output directory,
/// refusing mismatched artifact pairs.
pub fn load_artifacts(
    cfg: &RunConfig,
    checkpoint_dir: &Path,
) -> Result<(DenoiserModel, CodebookSet)> {
    let (ck_cfg, params, _adam, _state) = load_checkpoint_parts(&checkpoint_dir.join(MODEL_FILE))?;
    if ck_cfg.hash() != cfg.hash() {
        bail!(
            "checkpoint config hash {} does not match current config {}",
            ck_cfg.hash_hex(),
            cfg.hash_hex()
        );
    }
    let cb_path = checkpoint_dir.join(CODEBOOK_FILE);
    let mut r = std::io::BufReader::new(
        fs::File::open(&cb_path).with_context(|| format!("opening {}", cb_path.display()))?,
    );
    let (codebooks, cb_hash) =
        CodebookSet::read_from(&mut r).map_err(|e| anyhow::anyhow!("{e}"))?;
    if cb_hash != cfg.hash() {
        bail!(
            "codebooks carry config hash {cb_hash:016x}, checkpoint/config is {}",
            cfg.hash_hex()
        );
    }
    let mut model = DenoiserModel::init(
        model_config(cfg),
        rng::derive_seed(cfg.seed, "model-init", 0),
    )
    .map_err(|e| anyhow::anyhow!("{e}"))?;
    model
        .set_params(params)
        .map_err(|e| anyhow::anyhow!("{e}"))?;
    Ok((model, codebooks))
}

/// Extend one waveform. Deterministic in `(seed, utterance tag)`.
pub fn infer_one(
    cfg: &RunConfig,
    model: &DenoiserModel,
    codebooks: &CodebookSet,
    input: &Waveform,
    utterance_tag: &str,
    seed: u64,
) -> Result<Waveform> {
    if input.sample_rate != cfg.corpus_sample_rate {
        bail!(
            "input sample rate {} does not match codec config {}",
            input.sample_rate,
            cfg.corpus_sample_rate
        );
    }
    let s = schedule(cfg)?;
    let cond_grid = codec::encode(input, codebooks).map_err(|e| anyhow::anyhow!("{e}"))?;
    let cond = model
        .prepare_condition(&cond_grid)
        .map_err(|e| anyhow::anyhow!("{e}"))?;
    let sample_seed = rng::derive_seed(seed, "infer", rng::fnv1a(utterance_tag.as_bytes()));
    let tokens = d3pm::sample(
        model,
        &cond,
        &s,
        cond_grid.frames(),
        cond_grid.codebooks(),
        sample_seed,
    )
    .map_err(|e| anyhow::anyhow!("{e}"))?;
    let decoded =
        codec::decode(&tokens, codebooks, input.sample_rate).map_err(|e| anyhow::anyhow!("{e}"))?;
    // Frame-aligned output: same duration as the input.
    let mut samples = decoded.samples;
    samples.truncate(input.len());
    if samples.len() < input.len() {
        samples.resize(input.len(), 0.0);
    }
    Waveform::new(samples, input.sample_rate).map_err(|e| anyhow::anyhow!("{e}"))
}

/// Run inference over every WAV in `input_dir`, writing same-named
/// outputs plus a `run.meta` carrying the config hash.
pub fn cmd_infer(
    cfg: &RunConfig,
    checkpoint_dir: &Path,
    input_dir: &Path,
    out_dir: &Path,
    seed: u64,
) -> Result<PathBuf> {
    cfg.validate()?;
    let (model, codebooks) = load_artifacts(cfg, checkpoint_dir)?;
    fs::create_dir_all(out_dir)?;
    let mut files: Vec<String> = fs::read_dir(input_dir)
        .with_context(|| format!("listing {}", input_dir.display()))?
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n.ends_with(".wav"))
        .collect();
    files.sort();
    if files.is_empty() {
        bail!("no .wav files in {}", input_dir.display());
    }
    for name in &files {
        let input = read_wav(&input_dir.join(name)).map_err(|e| anyhow::anyhow!("{e}"))?;
        let output = infer_one(cfg, &model, &codebooks, &input, name, seed)?;
        write_wav(&out_dir.join(name), &output).map_err(|e| anyhow::anyhow!("{e}"))?;
    }
    fs::write(
        out_dir.join("run.meta"),
        format!(
            "config_hash = {}\nseed = {seed}\nrole = estimate\n",
            cfg.hash_hex()
        ),
    )?;
    Ok(out_dir.to_path_buf())
}

/// Read `config_hash` from an inference output directory.
pub fn read_run_meta_hash(dir: &Path) -> Option<String> {
    let text = fs::read_to_string(dir.join("run.meta")).ok()?;
    for line in text.lines() {
        if let Some(v) = line.strip_prefix("config_hash = ") {
            return Some(v.trim().to_string());
        }
    }
    None
}
