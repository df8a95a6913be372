use std::path::PathBuf;
use std::time::Instant;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};

use vqbwe_cli::{config::RunConfig, eval, infer, synth, train};

#[derive(Parser)]
#[command(
    name = "vqbwe",
    about = "Discrete-diffusion speech bandwidth extension over codec tokens",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Args)]
struct Common {
    /// Run configuration file (flat `key = value`; missing keys take
    /// defaults).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the synthetic corpus (clean WAVs, low-passed test inputs,
    /// manifest).
    Synth {
        #[command(flatten)]
        common: Common,
    },
    /// Train residual codebooks and the denoiser.
    Train {
        #[command(flatten)]
        common: Common,
        /// Corpus directory produced by `synth`.
        #[arg(long)]
        corpus: PathBuf,
        /// Resume from a previous training output directory.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Stop after this many epochs (leaves a resumable checkpoint).
        #[arg(long)]
        stop_after: Option<usize>,
    },
    /// Bandwidth-extend every WAV in an input directory.
    Infer {
        #[command(flatten)]
        common: Common,
        /// Training output directory (model.vqck + codebooks.vqcb).
        #[arg(long)]
        checkpoint: PathBuf,
        /// Directory of low-resolution input WAVs.
        #[arg(long)]
        input: PathBuf,
    },
    /// Compare an estimate directory against a reference directory.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Reference (clean) WAV directory.
        #[arg(long)]
        reference: PathBuf,
        /// Estimate WAV directory.
        #[arg(long)]
        estimate: PathBuf,
        /// Optional low-resolution input directory; adds LSD(in) columns.
        #[arg(long)]
        input: Option<PathBuf>,
    },
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let started = Instant::now();
    match cli.command {
        Cmd::Synth { common } => {
            let cfg = load_config(&common)?;
            let dir = synth::cmd_synth(&cfg, &common.out)?;
            println!(
                "synthesized {} utterances into {} (config {})",
                cfg.corpus_count,
                dir.display(),
                cfg.hash_hex()
            );
        }
        Cmd::Train {
            common,
            corpus,
            resume,
            stop_after,
        } => {
            let cfg = load_config(&common)?;
            let outcome =
                train::cmd_train(&cfg, &corpus, &common.out, resume.as_deref(), stop_after)?;
            if let (Some(first), Some(last)) = (
                outcome.epoch_train_loss.first(),
                outcome.epoch_train_loss.last(),
            ) {
                println!(
                    "train loss {first:.5} -> {last:.5} over {} epochs",
                    outcome.epoch_train_loss.len()
                );
            }
            println!("model: {}", outcome.model_path.display());
            println!("codebooks: {}", outcome.codebook_path.display());
            println!("losses: {}", outcome.losses_path.display());
        }
        Cmd::Infer {
            common,
            checkpoint,
            input,
        } => {
            let cfg = load_config(&common)?;
            let dir = infer::cmd_infer(&cfg, &checkpoint, &input, &common.out, cfg.seed)?;
            println!("wrote extended audio to {}", dir.display());
        }
        Cmd::Eval {
            common,
            reference,
            estimate,
            input,
        } => {
            let cfg = load_config(&common)?;
            let (report, path) =
                eval::cmd_eval(&cfg, &reference, &estimate, input.as_deref(), &common.out)?;
            print!("{}", report.table());
            println!("report: {}", path.display());
        }
    }
    println!("wall-clock: {:.2}s", started.elapsed().as_secs_f64());
    Ok(())
}
