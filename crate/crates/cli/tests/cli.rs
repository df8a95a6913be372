//! Binary-level smoke test: drive the actual `vqbwe` executable through
//! a miniature synth → train → infer → eval run.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_vqbwe")
}

fn run(args: &[&str]) -> String {
    let out = Command::new(bin())
        .args(args)
        .output()
        .expect("spawn vqbwe");
    assert!(
        out.status.success(),
        "vqbwe {args:?} failed:\n{}\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn write_config(dir: &Path) -> PathBuf {
    let path = dir.join("run.cfg");
    fs::write(
        &path,
        "seed = 5\n\
         corpus.count = 8\n\
         corpus.val_count = 1\n\
         corpus.test_count = 2\n\
         corpus.duration_s = 0.3\n\
         codec.num_codes = 32\n\
         codec.stages = 2\n\
         codec.kmeans_iters = 8\n\
         diffusion.T = 10\n\
         model.layers = 1\n\
         model.feature_dim = 16\n\
         model.state_dim = 8\n\
         model.heads = 2\n\
         model.conv_width = 2\n\
         model.block_conv_width = 3\n\
         model.lambda_aux = 1.0\n\
         train.lr = 0.003\n\
         train.epochs = 2\n",
    )
    .unwrap();
    path
}

#[test]
fn cli_runs_the_whole_pipeline() {
    let base = std::env::temp_dir().join("vqbwe_cli_smoke");
    let _ = fs::remove_dir_all(&base);
    fs::create_dir_all(&base).unwrap();
    let cfg = write_config(&base);
    let cfg = cfg.to_str().unwrap();
    let corpus = base.join("corpus");
    let rundir = base.join("run");
    let outdir = base.join("out");
    let evaldir = base.join("eval");

    let stdout = run(&["synth", "--config", cfg, "--out", corpus.to_str().unwrap()]);
    assert!(stdout.contains("synthesized 8 utterances"));
    assert!(corpus.join("manifest.tsv").exists());

    let stdout = run(&[
        "train",
        "--config",
        cfg,
        "--corpus",
        corpus.to_str().unwrap(),
        "--out",
        rundir.to_str().unwrap(),
    ]);
    assert!(stdout.contains("model:"), "{stdout}");
    assert!(rundir.join("model.vqck").exists());
    assert!(rundir.join("codebooks.vqcb").exists());

    let input = corpus.join("lowpass_1000");
    run(&[
        "infer",
        "--config",
        cfg,
        "--checkpoint",
        rundir.to_str().unwrap(),
        "--input",
        input.to_str().unwrap(),
        "--out",
        outdir.to_str().unwrap(),
    ]);
    assert!(outdir.join("run.meta").exists());

    let stdout = run(&[
        "eval",
        "--config",
        cfg,
        "--reference",
        corpus.join("clean").to_str().unwrap(),
        "--estimate",
        outdir.to_str().unwrap(),
        "--input",
        input.to_str().unwrap(),
        "--out",
        evaldir.to_str().unwrap(),
    ]);
    assert!(stdout.contains("LSD(out)"), "{stdout}");
    assert!(stdout.contains("mean"), "{stdout}");
    assert!(evaldir.join("report.jsonl").exists());
    let report = fs::read_to_string(evaldir.join("report.jsonl")).unwrap();
    assert!(report.contains("\"record\":\"aggregate\""));
}

#[test]
fn seed_flag_overrides_config() {
    let base = std::env::temp_dir().join("vqbwe_cli_seed");
    let _ = fs::remove_dir_all(&base);
    fs::create_dir_all(&base).unwrap();
    let cfg = write_config(&base);
    let cfg = cfg.to_str().unwrap();
    let a = base.join("a");
    let b = base.join("b");
    run(&[
        "synth",
        "--config",
        cfg,
        "--out",
        a.to_str().unwrap(),
        "--seed",
        "99",
    ]);
    run(&["synth", "--config", cfg, "--out", b.to_str().unwrap()]);
    let wav_a = fs::read(a.join("clean/utt_000.wav")).unwrap();
    let wav_b = fs::read(b.join("clean/utt_000.wav")).unwrap();
    assert_ne!(wav_a, wav_b, "seed override had no effect");
}

#[test]
fn unknown_config_key_fails_loudly() {
    let base = std::env::temp_dir().join("vqbwe_cli_badcfg");
    let _ = fs::remove_dir_all(&base);
    fs::create_dir_all(&base).unwrap();
    let path = base.join("bad.cfg");
    fs::write(&path, "no.such.key = 1\n").unwrap();
    let out = Command::new(bin())
        .args([
            "synth",
            "--config",
            path.to_str().unwrap(),
            "--out",
            base.join("x").to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("unknown config key"), "{stderr}");
}
