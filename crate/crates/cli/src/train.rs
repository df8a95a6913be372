//! Codec + denoiser training over a synthesized corpus.
//!
//! Residual codebooks are fitted on the training split's MDCT frames;
//! the denoiser then learns (low-passed tokens → clean tokens) pairs with
//! a fresh random cutoff per utterance per epoch. The learning rate decays
//! by `train.lr_decay` whenever validation loss fails to improve the best
//! by `train.plateau_eps` for two consecutive epochs.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use rand::RngExt;
use vqbwe_core::codec::{self, CodebookSet, Waveform};
use vqbwe_core::d3pm::TokenGrid;
use vqbwe_core::dsp;
use vqbwe_core::io::read_wav;
use vqbwe_core::nn::{Adam, Checkpoint, DenoiserConfig, DenoiserModel, Tensor};
use vqbwe_core::rng;
use vqbwe_core::schedule::NoiseSchedule;

use crate::config::RunConfig;

pub const MODEL_FILE: &str = "model.vqck";
pub const CODEBOOK_FILE: &str = "codebooks.vqcb";
pub const LOSSES_FILE: &str = "losses.tsv";

/// Denoiser configuration implied by a run config.
pub fn model_config(cfg: &RunConfig) -> DenoiserConfig {
    DenoiserConfig {
        num_codes: cfg.codec_num_codes,
        codebooks: cfg.codec_stages,
        num_steps: cfg.diffusion_steps,
        layers: cfg.model_layers,
        feature_dim: cfg.model_feature_dim,
        state_dim: cfg.model_state_dim,
        conv_width: cfg.model_conv_width,
        heads: cfg.model_heads,
        block_conv_width: cfg.model_block_conv_width,
        ffn_mult: cfg.model_ffn_mult,
        half_step_ffn: cfg.model_half_step_ffn,
        cond_layers: 2,
        cond_positional: cfg.model_cond_positional,
    }
}

/// Corruption schedule implied by a run config.
pub fn schedule(cfg: &RunConfig) -> Result<NoiseSchedule> {
    NoiseSchedule::linear(
        cfg.diffusion_steps,
        cfg.codec_num_codes,
        cfg.diffusion_gamma_max,
        cfg.diffusion_beta_max,
    )
    .map_err(|e| anyhow::anyhow!("schedule: {e}"))
}

/// Learning-rate plateau rule: decay when the best validation loss has
/// not improved by at least `eps` for two consecutive epochs.
#[derive(Debug, Clone)]
pub struct PlateauRule {
    pub eps: f64,
    pub decay: f64,
    best: f64,
    streak: usize,
}

impl PlateauRule {
    pub fn new(eps: f64, decay: f64) -> Self {
        Self {
            eps,
            decay,
            best: f64::INFINITY,
            streak: 0,
        }
    }

    pub fn with_state(eps: f64, decay: f64, best: f64, streak: usize) -> Self {
        Self {
            eps,
            decay,
            best,
            streak,
        }
    }

    pub fn best(&self) -> f64 {
        self.best
    }

    pub fn streak(&self) -> usize {
        self.streak
    }

    /// Observe one epoch's validation loss; scales `lr` in place and
    /// reports whether a decay fired.
    pub fn observe(&mut self, val_loss: f64, lr: &mut f64) -> bool {
        if val_loss < self.best - self.eps {
            self.best = val_loss;
            self.streak = 0;
            return false;
        }
        self.best = self.best.min(val_loss);
        self.streak += 1;
        if self.streak >= 2 {
            *lr *= self.decay;
            self.streak = 0;
            true
        } else {
            false
        }
    }
}

/// One manifest entry.
#[derive(Debug, Clone)]
pub struct ManifestEntry {
    pub index: usize,
    pub file: String,
    pub split: String,
}

pub fn read_manifest(corpus_dir: &Path) -> Result<Vec<ManifestEntry>> {
    let text = fs::read_to_string(corpus_dir.join("manifest.tsv"))
        .with_context(|| format!("reading manifest in {}", corpus_dir.display()))?;
    let mut out = Vec::new();
    for line in text.lines() {
        if line.starts_with('#') || line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() < 3 {
            bail!("malformed manifest line {line:?}");
        }
        out.push(ManifestEntry {
            index: cols[0]
                .parse()
                .with_context(|| format!("manifest id {:?}", cols[0]))?,
            file: cols[1].to_string(),
            split: cols[2].to_string(),
        });
    }
    Ok(out)
}

struct Utterance {
    wave: Waveform,
    clean_tokens: TokenGrid,
}

/// Training result summary.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model_path: PathBuf,
    pub codebook_path: PathBuf,
    pub losses_path: PathBuf,
    pub epoch_train_loss: Vec<f64>,
    pub epoch_val_loss: Vec<f64>,
    pub lr_history: Vec<f64>,
}

/// Saved trainer state carried inside checkpoints.
#[derive(Debug, Clone, Copy)]
pub struct TrainState {
    pub epochs_done: usize,
    pub lr: f64,
    pub best_val: f64,
    pub streak: usize,
}

/// Named tensor maps for the model parameters and optimizer state.
pub type CheckpointParts = (
    RunConfig,
    BTreeMap<String, Tensor>,
    BTreeMap<String, Tensor>,
    TrainState,
);

/// Partition checkpoint tensors into model / optimizer / trainer state.
pub fn load_checkpoint_parts(path: &Path) -> Result<CheckpointParts> {
    let ck =
        Checkpoint::load(path).map_err(|e| anyhow::anyhow!("loading {}: {e}", path.display()))?;
    let cfg = RunConfig::from_text(&ck.config_text)?;
    let mut model = BTreeMap::new();
    let mut adam = BTreeMap::new();
    let mut state = TrainState {
        epochs_done: 0,
        lr: cfg.train_lr,
        best_val: f64::INFINITY,
        streak: 0,
    };
    for (name, tensor) in ck.to_tensors() {
        if name.starts_with("adam.") {
            adam.insert(name, tensor);
        } else if let Some(key) = name.strip_prefix("state.") {
            match key {
                "epochs_done" => state.epochs_done = tensor.item() as usize,
                "lr" => state.lr = tensor.item(),
                "best_val" => state.best_val = tensor.item(),
                "streak" => state.streak = tensor.item() as usize,
                _ => bail!("unknown state entry {name}"),
            }
        } else {
            model.insert(name, tensor);
        }
    }
    Ok((cfg, model, adam, state))
}

fn save_checkpoint(
    path: &Path,
    cfg: &RunConfig,
    model: &DenoiserModel,
    opt: &Adam,
    state: TrainState,
) -> Result<()> {
    let mut tensors = model.params().clone();
    for (name, t) in opt.state_tensors() {
        tensors.insert(name, t);
    }
    tensors.insert(
        "state.epochs_done".into(),
        Tensor::scalar(state.epochs_done as f64),
    );
    tensors.insert("state.lr".into(), Tensor::scalar(state.lr));
    tensors.insert("state.best_val".into(), Tensor::scalar(state.best_val));
    tensors.insert("state.streak".into(), Tensor::scalar(state.streak as f64));
    Checkpoint::from_tensors(&cfg.to_text(), &tensors)
        .save(path)
        .map_err(|e| anyhow::anyhow!("saving {}: {e}", path.display()))
}

/// Uniform training cutoff in `[lo, hi] · Nyquist`, one stream per
/// (epoch, utterance).
fn training_cutoff(cfg: &RunConfig, epoch: usize, utterance: usize) -> f64 {
    let mut rng = rng::stream(
        cfg.seed,
        "cutoff",
        (epoch * cfg.corpus_count + utterance) as u64,
    );
    let nyquist = cfg.corpus_sample_rate as f64 / 2.0;
    let frac = rng.random_range(cfg.train_cutoff_lo_frac..=cfg.train_cutoff_hi_frac);
    frac * nyquist
}

/// Validation timesteps: quarter points of the schedule.
fn val_timesteps(steps: usize) -> Vec<usize> {
    let mut ts: Vec<usize> = [steps / 4, steps / 2, 3 * steps / 4, steps]
        .iter()
        .map(|&t| t.max(1))
        .collect();
    ts.dedup();
    ts
}

/// Train codebooks and denoiser. With `resume`, continues from a previous
/// checkpoint (config must hash-match). `stop_after` caps the number of
/// epochs actually run, leaving a resumable partial checkpoint.
pub fn cmd_train(
    cfg: &RunConfig,
    corpus_dir: &Path,
    out_dir: &Path,
    resume: Option<&Path>,
    stop_after: Option<usize>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    fs::create_dir_all(out_dir)?;
    let manifest = read_manifest(corpus_dir)?;
    if manifest.len() != cfg.corpus_count {
        bail!(
            "manifest has {} utterances but config expects {}",
            manifest.len(),
            cfg.corpus_count
        );
    }
    if let Some(hash) = crate::synth::read_meta_hash(&corpus_dir.join("clean")) {
        if hash != cfg.hash_hex() {
            bail!(
                "corpus was generated with config hash {hash}, current config is {}",
                cfg.hash_hex()
            );
        }
    }
    let clean_dir = corpus_dir.join("clean");
    let waves: Vec<Waveform> = manifest
        .iter()
        .map(|e| read_wav(&clean_dir.join(&e.file)).map_err(|err| anyhow::anyhow!("{err}")))
        .collect::<Result<_>>()?;
    for w in &waves {
        if w.sample_rate != cfg.corpus_sample_rate {
            bail!(
                "corpus sample rate {} does not match config {}",
                w.sample_rate,
                cfg.corpus_sample_rate
            );
        }
    }
    let (train_idx, val_idx, _) = cfg.splits();

    // Stage 1: residual codebooks on the training split.
    let codebook_path = out_dir.join(CODEBOOK_FILE);
    let codebooks = if let Some(dir) = resume {
        let path = dir.join(CODEBOOK_FILE);
        let mut r = std::io::BufReader::new(fs::File::open(&path)?);
        let (cb, hash) = CodebookSet::read_from(&mut r).map_err(|e| anyhow::anyhow!("{e}"))?;
        if hash != cfg.hash() {
            bail!("resume codebooks carry a different config hash");
        }
        cb
    } else {
        let mut all = vqbwe_core::codec::FrameMatrix::zeros(0, cfg.codec_window_len / 2);
        for &i in &train_idx {
            let frames = codec::mdct(&waves[i].samples, cfg.codec_window_len)
                .map_err(|e| anyhow::anyhow!("{e}"))?;
            all.frames += frames.frames;
            all.data.extend_from_slice(&frames.data);
        }
        codec::train_rvq(
            &all,
            cfg.codec_stages,
            cfg.codec_num_codes,
            cfg.codec_kmeans_iters,
            rng::derive_seed(cfg.seed, "rvq", 0),
        )
        .map_err(|e| anyhow::anyhow!("codebook training: {e}"))?
    };
    {
        let mut w = std::io::BufWriter::new(fs::File::create(&codebook_path)?);
        codebooks
            .write_to(&mut w, cfg.hash())
            .map_err(|e| anyhow::anyhow!("{e}"))?;
    }

    // Clean tokens for every utterance.
    let utterances: Vec<Utterance> = waves
        .into_iter()
        .map(|wave| {
            let clean_tokens =
                codec::encode(&wave, &codebooks).map_err(|e| anyhow::anyhow!("{e}"))?;
            Ok(Utterance { wave, clean_tokens })
        })
        .collect::<Result<_>>()?;

    // Stage 2: the denoiser.
    let s = schedule(cfg)?;
    let mcfg = model_config(cfg);
    let (mut model, mut opt, start_epoch, mut lr, mut plateau) = if let Some(dir) = resume {
        let (ck_cfg, params, adam_state, st) = load_checkpoint_parts(&dir.join(MODEL_FILE))?;
        if ck_cfg.hash() != cfg.hash() {
            bail!("resume checkpoint carries a different config hash");
        }
        let mut model =
            DenoiserModel::init(mcfg.clone(), rng::derive_seed(cfg.seed, "model-init", 0))
                .map_err(|e| anyhow::anyhow!("{e}"))?;
        model
            .set_params(params)
            .map_err(|e| anyhow::anyhow!("{e}"))?;
        let mut opt = Adam::new(st.lr);
        opt.restore(&adam_state)
            .map_err(|e| anyhow::anyhow!("{e}"))?;
        let plateau = PlateauRule::with_state(
            cfg.train_plateau_eps,
            cfg.train_lr_decay,
            st.best_val,
            st.streak,
        );
        (model, opt, st.epochs_done, st.lr, plateau)
    } else {
        let model = DenoiserModel::init(mcfg, rng::derive_seed(cfg.seed, "model-init", 0))
            .map_err(|e| anyhow::anyhow!("{e}"))?;
        let opt = Adam::new(cfg.train_lr);
        let plateau = PlateauRule::new(cfg.train_plateau_eps, cfg.train_lr_decay);
        (model, opt, 0usize, cfg.train_lr, plateau)
    };

    let nyquist = cfg.corpus_sample_rate as f64 / 2.0;
    let val_cut = cfg.train_val_cutoff_frac * nyquist;
    let val_ts = val_timesteps(cfg.diffusion_steps);
    let model_path = out_dir.join(MODEL_FILE);
    let mut losses_lines = format!("# config_hash = {}\n# epoch\ttrain_loss\tval_loss\tlr\n", cfg.hash_hex());
    let mut epoch_train_loss = Vec::new();
    let mut epoch_val_loss = Vec::new();
    let mut lr_history = Vec::new();
    // Last epoch-boundary snapshot, written out if a step diverges.
    let mut last_good = (
        model.clone(),
        opt.clone(),
        TrainState {
            epochs_done: start_epoch,
            lr,
            best_val: plateau.best(),
            streak: plateau.streak(),
        },
    );

    let end_epoch = stop_after
        .map(|n| (start_epoch + n).min(cfg.train_epochs))
        .unwrap_or(cfg.train_epochs);
    for epoch in start_epoch..end_epoch {
        // Deterministic per-epoch shuffle of the training order.
        let mut order = train_idx.clone();
        let mut order_rng = rng::stream(cfg.seed, "order", epoch as u64);
        for i in (1..order.len()).rev() {
            let j = order_rng.random_range(0..=i);
            order.swap(i, j);
        }
        let mut sum = 0.0;
        for &u in &order {
            let cutoff = training_cutoff(cfg, epoch, u);
            let low =
                dsp::lowpass(&utterances[u].wave, cutoff).map_err(|e| anyhow::anyhow!("{e}"))?;
            let cond = codec::encode(&low, &codebooks).map_err(|e| anyhow::anyhow!("{e}"))?;
            opt.lr = lr;
            let mut step_rng = rng::stream(cfg.seed, "step", (epoch * cfg.corpus_count + u) as u64);
            let loss = match vqbwe_core::nn::train_step(
                &mut model,
                &mut opt,
                &utterances[u].clean_tokens,
                &cond,
                &s,
                cfg.model_lambda_aux,
                &mut step_rng,
            ) {
                Ok(l) => l,
                Err(e) => {
                    save_checkpoint(&model_path, cfg, &last_good.0, &last_good.1, last_good.2)?;
                    bail!(
                        "training diverged at epoch {epoch}, utterance {u}: {e}; \
                         last good checkpoint written to {}",
                        model_path.display()
                    );
                }
            };
            sum += loss.total;
        }
        let train_loss = sum / order.len() as f64;

        let mut vsum = 0.0;
        let mut vcount = 0usize;
        for &u in &val_idx {
            let low =
                dsp::lowpass(&utterances[u].wave, val_cut).map_err(|e| anyhow::anyhow!("{e}"))?;
            let cond = codec::encode(&low, &codebooks).map_err(|e| anyhow::anyhow!("{e}"))?;
            for (vi, &t) in val_ts.iter().enumerate() {
                let loss = vqbwe_core::nn::eval_loss(
                    &model,
                    &utterances[u].clean_tokens,
                    &cond,
                    t,
                    &s,
                    rng::derive_seed(cfg.seed, "val", (u * 17 + vi) as u64),
                    cfg.model_lambda_aux,
                )
                .map_err(|e| anyhow::anyhow!("{e}"))?;
                vsum += loss.total;
                vcount += 1;
            }
        }
        let val_loss = if vcount > 0 {
            vsum / vcount as f64
        } else {
            train_loss
        };
        plateau.observe(val_loss, &mut lr);

        epoch_train_loss.push(train_loss);
        epoch_val_loss.push(val_loss);
        lr_history.push(lr);
        losses_lines.push_str(&format!("{epoch}\t{train_loss}\t{val_loss}\t{lr}\n"));
        last_good = (
            model.clone(),
            opt.clone(),
            TrainState {
                epochs_done: epoch + 1,
                lr,
                best_val: plateau.best(),
                streak: plateau.streak(),
            },
        );
    }

    save_checkpoint(
        &model_path,
        cfg,
        &model,
        &opt,
        TrainState {
            epochs_done: end_epoch,
            lr,
            best_val: plateau.best(),
            streak: plateau.streak(),
        },
    )?;
    let losses_path = out_dir.join(LOSSES_FILE);
    fs::write(&losses_path, losses_lines)?;
    Ok(TrainOutcome {
        model_path,
        codebook_path,
        losses_path,
        epoch_train_loss,
        epoch_val_loss,
        lr_history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plateau_rule_decays_after_two_flat_epochs() {
        let mut rule = PlateauRule::new(1e-4, 0.8);
        let mut lr = 1.0e-3;
        assert!(!rule.observe(1.0, &mut lr)); // establishes the best
        assert!(!rule.observe(0.9, &mut lr)); // improves
        assert!(!rule.observe(0.9, &mut lr)); // flat #1
        assert!(rule.observe(0.95, &mut lr)); // flat #2 → decay
        assert!((lr - 0.8e-3).abs() < 1e-18);
        // Streak resets after a decay.
        assert!(!rule.observe(0.95, &mut lr));
        assert!(rule.observe(0.95, &mut lr));
        assert!((lr - 0.64e-3).abs() < 1e-18);
    }

    #[test]
    fn plateau_rule_requires_minimum_improvement() {
        let mut rule = PlateauRule::new(1e-4, 0.8);
        let mut lr = 1.0;
        rule.observe(1.0, &mut lr);
        // Improvement below eps still counts toward the plateau streak.
        assert!(!rule.observe(1.0 - 5e-5, &mut lr));
        assert!(rule.observe(1.0 - 6e-5, &mut lr));
        assert!((lr - 0.8).abs() < 1e-15);
    }

    #[test]
    fn val_timesteps_are_sane() {
        assert_eq!(val_timesteps(100), vec![25, 50, 75, 100]);
        assert_eq!(val_timesteps(1), vec![1]);
        assert_eq!(val_timesteps(4), vec![1, 2, 3, 4]);
    }
}
