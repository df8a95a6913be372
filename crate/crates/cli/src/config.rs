//! Run configuration: a flat text format with dotted keys.
//!
//! A config fully determines a run. Serialization writes every key in
//! sorted order with round-trip float formatting, so the canonical text
//! (and its hash) is stable. Unknown keys are rejected.

use std::collections::BTreeMap;
use std::path::Path;

use anyhow::{bail, Context, Result};
use vqbwe_core::rng::fnv1a;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,

    pub corpus_count: usize,
    pub corpus_duration_s: f64,
    pub corpus_sample_rate: u32,
    /// Fundamental frequencies are drawn from a finite grid spanning
    /// [f0_min_hz, f0_max_hz] with `f0_grid` points.
    pub corpus_f0_min_hz: f64,
    pub corpus_f0_max_hz: f64,
    pub corpus_f0_grid: usize,
    /// Harmonic amplitude decay exponents, a finite grid likewise.
    pub corpus_decay_min: f64,
    pub corpus_decay_max: f64,
    pub corpus_decay_grid: usize,
    /// Amplitude of the prototype-keyed broadband noise component,
    /// relative to unit harmonic scale.
    pub corpus_noise_level: f64,
    pub corpus_val_count: usize,
    pub corpus_test_count: usize,

    pub codec_window_len: usize,
    pub codec_num_codes: usize,
    pub codec_stages: usize,
    pub codec_kmeans_iters: usize,

    pub diffusion_steps: usize,
    pub diffusion_gamma_max: f64,
    /// Per-category uniform-resample ramp endpoint (Eq. layout: the total
    /// uniform mass at the final step is `K · beta_max`).
    pub diffusion_beta_max: f64,

    pub model_layers: usize,
    pub model_feature_dim: usize,
    pub model_state_dim: usize,
    pub model_conv_width: usize,
    pub model_heads: usize,
    pub model_block_conv_width: usize,
    pub model_ffn_mult: usize,
    pub model_half_step_ffn: bool,
    pub model_cond_positional: bool,
    pub model_lambda_aux: f64,

    pub train_lr: f64,
    pub train_lr_decay: f64,
    pub train_epochs: usize,
    pub train_plateau_eps: f64,
    pub train_cutoff_lo_frac: f64,
    pub train_cutoff_hi_frac: f64,
    pub train_val_cutoff_frac: f64,

    pub eval_cutoffs_hz: Vec<f64>,
    pub eval_fft_size: usize,
    pub eval_hop: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            corpus_count: 50,
            corpus_duration_s: 0.5,
            corpus_sample_rate: 8000,
            corpus_f0_min_hz: 130.0,
            corpus_f0_max_hz: 220.0,
            corpus_f0_grid: 8,
            corpus_decay_min: 0.7,
            corpus_decay_max: 1.3,
            corpus_decay_grid: 3,
            corpus_noise_level: 0.02,
            corpus_val_count: 5,
            corpus_test_count: 20,
            codec_window_len: 64,
            codec_num_codes: 64,
            codec_stages: 4,
            codec_kmeans_iters: 20,
            diffusion_steps: 100,
            diffusion_gamma_max: 0.9,
            diffusion_beta_max: 0.1 / 64.0,
            model_layers: 2,
            model_feature_dim: 32,
            model_state_dim: 16,
            model_conv_width: 4,
            model_heads: 2,
            model_block_conv_width: 5,
            model_ffn_mult: 2,
            model_half_step_ffn: true,
            model_cond_positional: true,
            model_lambda_aux: 0.001,
            train_lr: 3e-5,
            train_lr_decay: 0.8,
            train_epochs: 30,
            train_plateau_eps: 1e-4,
            train_cutoff_lo_frac: 1.0 / 6.0,
            train_cutoff_hi_frac: 0.5,
            train_val_cutoff_frac: 0.25,
            eval_cutoffs_hz: vec![1000.0],
            eval_fft_size: 2048,
            eval_hop: 512,
        }
    }
}

impl RunConfig {
    /// All keys and current values, sorted.
    fn entries(&self) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        let mut put = |k: &str, v: String| {
            m.insert(k.to_string(), v);
        };
        put("seed", self.seed.to_string());
        put("corpus.count", self.corpus_count.to_string());
        put("corpus.duration_s", self.corpus_duration_s.to_string());
        put("corpus.sample_rate", self.corpus_sample_rate.to_string());
        put("corpus.f0_min_hz", self.corpus_f0_min_hz.to_string());
        put("corpus.f0_max_hz", self.corpus_f0_max_hz.to_string());
        put("corpus.f0_grid", self.corpus_f0_grid.to_string());
        put("corpus.decay_min", self.corpus_decay_min.to_string());
        put("corpus.decay_max", self.corpus_decay_max.to_string());
        put("corpus.decay_grid", self.corpus_decay_grid.to_string());
        put("corpus.noise_level", self.corpus_noise_level.to_string());
        put("corpus.val_count", self.corpus_val_count.to_string());
        put("corpus.test_count", self.corpus_test_count.to_string());
        put("codec.window_len", self.codec_window_len.to_string());
        put("codec.num_codes", self.codec_num_codes.to_string());
        put("codec.stages", self.codec_stages.to_string());
        put("codec.kmeans_iters", self.codec_kmeans_iters.to_string());
        put("diffusion.T", self.diffusion_steps.to_string());
        put("diffusion.gamma_max", self.diffusion_gamma_max.to_string());
        put("diffusion.beta_max", self.diffusion_beta_max.to_string());
        put("model.layers", self.model_layers.to_string());
        put("model.feature_dim", self.model_feature_dim.to_string());
        put("model.state_dim", self.model_state_dim.to_string());
        put("model.conv_width", self.model_conv_width.to_string());
        put("model.heads", self.model_heads.to_string());
        put(
            "model.block_conv_width",
            self.model_block_conv_width.to_string(),
        );
        put("model.ffn_mult", self.model_ffn_mult.to_string());
        put("model.half_step_ffn", self.model_half_step_ffn.to_string());
        put(
            "model.cond_positional",
            self.model_cond_positional.to_string(),
        );
        put("model.lambda_aux", self.model_lambda_aux.to_string());
        put("train.lr", self.train_lr.to_string());
        put("train.lr_decay", self.train_lr_decay.to_string());
        put("train.epochs", self.train_epochs.to_string());
        put("train.plateau_eps", self.train_plateau_eps.to_string());
        put(
            "train.cutoff_lo_frac",
            self.train_cutoff_lo_frac.to_string(),
        );
        put(
            "train.cutoff_hi_frac",
            self.train_cutoff_hi_frac.to_string(),
        );
        put(
            "train.val_cutoff_frac",
            self.train_val_cutoff_frac.to_string(),
        );
        put(
            "eval.cutoffs_hz",
            self.eval_cutoffs_hz
                .iter()
                .map(|v| v.to_string())
                .collect::<Vec<_>>()
                .join(","),
        );
        put("eval.fft_size", self.eval_fft_size.to_string());
        put("eval.hop", self.eval_hop.to_string());
        m
    }

    /// Canonical text: sorted `key = value` lines.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.entries() {
            out.push_str(&format!("{k} = {v}\n"));
        }
        out
    }

    /// FNV-1a hash of the canonical text.
    pub fn hash(&self) -> u64 {
        fnv1a(self.to_text().as_bytes())
    }

    pub fn hash_hex(&self) -> String {
        format!("{:016x}", self.hash())
    }

    /// Parse the flat key-value format. Missing keys take defaults;
    /// unknown or duplicate keys are errors.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                bail!("line {}: expected `key = value`, got {raw:?}", lineno + 1);
            };
            let key = key.trim();
            let value = value.trim();
            if seen.insert(key.to_string(), lineno).is_some() {
                bail!("line {}: duplicate key {key}", lineno + 1);
            }
            cfg.set(key, value)
                .with_context(|| format!("line {}", lineno + 1))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        Self::from_text(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn p<T: std::str::FromStr>(key: &str, v: &str) -> Result<T>
        where
            T::Err: std::fmt::Display,
        {
            v.parse()
                .map_err(|e| anyhow::anyhow!("key {key}: cannot parse {v:?}: {e}"))
        }
        match key {
            "seed" => self.seed = p(key, value)?,
            "corpus.count" => self.corpus_count = p(key, value)?,
            "corpus.duration_s" => self.corpus_duration_s = p(key, value)?,
            "corpus.sample_rate" => self.corpus_sample_rate = p(key, value)?,
            "corpus.f0_min_hz" => self.corpus_f0_min_hz = p(key, value)?,
            "corpus.f0_max_hz" => self.corpus_f0_max_hz = p(key, value)?,
            "corpus.f0_grid" => self.corpus_f0_grid = p(key, value)?,
            "corpus.decay_min" => self.corpus_decay_min = p(key, value)?,
            "corpus.decay_max" => self.corpus_decay_max = p(key, value)?,
            "corpus.decay_grid" => self.corpus_decay_grid = p(key, value)?,
            "corpus.noise_level" => self.corpus_noise_level = p(key, value)?,
            "corpus.val_count" => self.corpus_val_count = p(key, value)?,
            "corpus.test_count" => self.corpus_test_count = p(key, value)?,
            "codec.window_len" => self.codec_window_len = p(key, value)?,
            "codec.num_codes" => self.codec_num_codes = p(key, value)?,
            "codec.stages" => self.codec_stages = p(key, value)?,
            "codec.kmeans_iters" => self.codec_kmeans_iters = p(key, value)?,
            "diffusion.T" => self.diffusion_steps = p(key, value)?,
            "diffusion.gamma_max" => self.diffusion_gamma_max = p(key, value)?,
            "diffusion.beta_max" => self.diffusion_beta_max = p(key, value)?,
            "model.layers" => self.model_layers = p(key, value)?,
            "model.feature_dim" => self.model_feature_dim = p(key, value)?,
            "model.state_dim" => self.model_state_dim = p(key, value)?,
            "model.conv_width" => self.model_conv_width = p(key, value)?,
            "model.heads" => self.model_heads = p(key, value)?,
            "model.block_conv_width" => self.model_block_conv_width = p(key, value)?,
            "model.ffn_mult" => self.model_ffn_mult = p(key, value)?,
            "model.half_step_ffn" => self.model_half_step_ffn = p(key, value)?,
            "model.cond_positional" => self.model_cond_positional = p(key, value)?,
            "model.lambda_aux" => self.model_lambda_aux = p(key, value)?,
            "train.lr" => self.train_lr = p(key, value)?,
            "train.lr_decay" => self.train_lr_decay = p(key, value)?,
            "train.epochs" => self.train_epochs = p(key, value)?,
            "train.plateau_eps" => self.train_plateau_eps = p(key, value)?,
            "train.cutoff_lo_frac" => self.train_cutoff_lo_frac = p(key, value)?,
            "train.cutoff_hi_frac" => self.train_cutoff_hi_frac = p(key, value)?,
            "train.val_cutoff_frac" => self.train_val_cutoff_frac = p(key, value)?,
            "eval.cutoffs_hz" => {
                self.eval_cutoffs_hz = value
                    .split(',')
                    .map(|s| p::<f64>(key, s.trim()))
                    .collect::<Result<Vec<_>>>()?;
            }
            "eval.fft_size" => self.eval_fft_size = p(key, value)?,
            "eval.hop" => self.eval_hop = p(key, value)?,
            _ => bail!("unknown config key {key:?}"),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.corpus_count == 0 {
            bail!("corpus.count must be positive");
        }
        if self.corpus_val_count + self.corpus_test_count >= self.corpus_count {
            bail!(
                "corpus.val_count + corpus.test_count = {} leaves no training data (count {})",
                self.corpus_val_count + self.corpus_test_count,
                self.corpus_count
            );
        }
        if self.corpus_f0_grid == 0 || self.corpus_decay_grid == 0 {
            bail!("f0/decay grids must be nonempty");
        }
        let nyquist = self.corpus_sample_rate as f64 / 2.0;
        if !(self.corpus_f0_max_hz < nyquist && self.corpus_f0_min_hz > 0.0) {
            bail!("f0 range outside (0, Nyquist)");
        }
        for &c in &self.eval_cutoffs_hz {
            if !(c > 0.0 && c < nyquist) {
                bail!("eval cutoff {c} Hz outside (0, {nyquist})");
            }
        }
        if !(self.train_cutoff_lo_frac > 0.0
            && self.train_cutoff_lo_frac <= self.train_cutoff_hi_frac
            && self.train_cutoff_hi_frac < 1.0)
        {
            bail!("train cutoff fractions must satisfy 0 < lo <= hi < 1");
        }
        Ok(())
    }

    /// Split of utterance indices: train, then val, then test (the test
    /// split is the corpus tail).
    pub fn splits(&self) -> (Vec<usize>, Vec<usize>, Vec<usize>) {
        let train_end = self.corpus_count - self.corpus_val_count - self.corpus_test_count;
        let val_end = train_end + self.corpus_val_count;
        (
            (0..train_end).collect(),
            (train_end..val_end).collect(),
            (val_end..self.corpus_count).collect(),
        )
    }

    pub fn split_name(&self, index: usize) -> &'static str {
        let train_end = self.corpus_count - self.corpus_val_count - self.corpus_test_count;
        let val_end = train_end + self.corpus_val_count;
        if index < train_end {
            "train"
        } else if index < val_end {
            "val"
        } else {
            "test"
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrips_losslessly() {
        let cfg = RunConfig {
            train_lr: 3.0e-5,
            diffusion_beta_max: 0.1 / 64.0,
            eval_cutoffs_hz: vec![750.0, 1333.3333333333333],
            ..RunConfig::default()
        };
        let text = cfg.to_text();
        let back = RunConfig::from_text(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.to_text(), text);
        assert_eq!(back.hash(), cfg.hash());
    }

    #[test]
    fn rejects_unknown_keys() {
        let err = RunConfig::from_text("bogus.key = 3\n").unwrap_err();
        assert!(format!("{err:#}").contains("unknown config key"));
    }

    #[test]
    fn rejects_duplicates_and_bad_values() {
        assert!(RunConfig::from_text("seed = 1\nseed = 2\n").is_err());
        assert!(RunConfig::from_text("seed = banana\n").is_err());
        assert!(RunConfig::from_text("corpus.count = 5\ncorpus.test_count = 20\n").is_err());
    }

    #[test]
    fn comments_and_blanks_are_ignored() {
        let cfg = RunConfig::from_text("# a comment\n\nseed = 7\n").unwrap();
        assert_eq!(cfg.seed, 7);
    }

    #[test]
    fn splits_partition_the_corpus() {
        let cfg = RunConfig::default();
        let (train, val, test) = cfg.splits();
        assert_eq!(train.len() + val.len() + test.len(), cfg.corpus_count);
        assert_eq!(test.len(), cfg.corpus_test_count);
        assert_eq!(cfg.split_name(0), "train");
        assert_eq!(cfg.split_name(cfg.corpus_count - 1), "test");
    }

    #[test]
    fn hash_tracks_content() {
        let a = RunConfig::default();
        let b = RunConfig {
            seed: 43,
            ..RunConfig::default()
        };
        assert_ne!(a.hash(), b.hash());
    }
}
