mod common;

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn gmvae(config: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gmvae"))
        .arg("--config")
        .arg(config)
        .args(args)
        .env_remove("GMVAE_SEED")
        .output()
        .unwrap()
}

fn ok(out: Output) -> String {
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(out.status.success(), "exit {:?}\n{stderr}", out.status.code());
    assert!(stderr.contains("config hash"), "{stderr}");
    String::from_utf8(out.stdout).unwrap()
}

fn csv_rows(path: &Path) -> usize {
    fs::read_to_string(path).unwrap().lines().count() - 1
}

#[test]
fn end_to_end_commands_and_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let cfg = root.join("config.json");
    common::small_run(&root.join("run")).save(&cfg).unwrap();
    let p = |rel: &str| root.join(rel).display().to_string();

    let stdout = ok(gmvae(&cfg, &["gen-corpus", "--export-audio", "2"]));
    assert!(stdout.contains("K=3 M=4 examples=40"), "{stdout}");
    assert!(root.join("run/corpus/manifest.json").exists());
    assert!(root.join("run/corpus/audio/00001.wav").exists());

    ok(gmvae(&cfg, &["train", "--n-labels", "100"]));
    ok(gmvae(&cfg, &["train", "--n-labels", "0"]));
    ok(gmvae(&cfg, &["train", "--n-labels", "100", "--mode", "vae"]));
    let ckpt = p("run/models/gmvae_n100/final.ckpt");
    assert!(root.join("run/models/gmvae_n100/epoch_002.ckpt").exists());
    assert_eq!(csv_rows(&root.join("run/models/gmvae_n100/losses.csv")), 2);

    ok(gmvae(&cfg, &["synth", "--checkpoint", &ckpt, "--pitch", "1", "--instrument", "2", "--w", "0.5", "--repetitions", "3", "--out", &p("synth")]));
    assert_eq!(csv_rows(&root.join("synth/index.csv")), 3);

    ok(gmvae(&cfg, &["transfer", "--checkpoint", &ckpt, "--source-class", "0", "--target-class", "1", "--alpha", "0", "--alpha", "1", "--out", &p("transfer")]));
    assert!(csv_rows(&root.join("transfer/index.csv")) >= 2);

    let stdout = ok(gmvae(&cfg, &["traverse", "--checkpoint", &ckpt, "--dim", "auto", "--out", &p("traverse")]));
    assert!(stdout.contains("chosen dimension"), "{stdout}");
    ok(gmvae(&cfg, &["traverse", "--checkpoint", &ckpt, "--dim", "3", "--delta", "-2", "--out", &p("traverse3")]));

    ok(gmvae(&cfg, &["export-latents", "--checkpoint", &ckpt, "--out", &p("latents.csv")]));
    // Every example plus 4 pitch means and 3 timbre means.
    assert_eq!(csv_rows(&root.join("latents.csv")), 40 + 4 + 3);

    ok(gmvae(&cfg, &["eval", "--only", "centroid", "--only", "disentanglement"]));
    assert!(root.join("run/eval/report.json").exists());
    assert!(root.join("run/eval/f_scores.csv").exists());

    // Exit codes.
    fs::write(root.join("bad.json"), "{ not json").unwrap();
    assert_eq!(gmvae(&root.join("bad.json"), &["gen-corpus"]).status.code(), Some(2));
    let seeded = Command::new(env!("CARGO_BIN_EXE_gmvae"))
        .args(["--config", &cfg.display().to_string(), "gen-corpus", "--out", &p("c2")])
        .env("GMVAE_SEED", "not-a-number")
        .output()
        .unwrap();
    assert_eq!(seeded.status.code(), Some(2));
    let missing = gmvae(&cfg, &["synth", "--checkpoint", &p("nope.ckpt"), "--pitch", "0", "--instrument", "0", "--out", &p("s2")]);
    assert_eq!(missing.status.code(), Some(5));
    let bad_class = gmvae(&cfg, &["synth", "--checkpoint", &ckpt, "--pitch", "0", "--instrument", "7", "--out", &p("s3")]);
    assert_eq!(bad_class.status.code(), Some(4));
    let bad_dim = gmvae(&cfg, &["traverse", "--checkpoint", &ckpt, "--dim", "99", "--out", &p("t2")]);
    assert_eq!(bad_dim.status.code(), Some(4));
    let vae = p("run/models/vae_n100/final.ckpt");
    let vae_synth = gmvae(&cfg, &["synth", "--checkpoint", &vae, "--pitch", "0", "--instrument", "0", "--out", &p("s4")]);
    assert_eq!(vae_synth.status.code(), Some(4));
    let no_models = gmvae(&cfg, &["eval", "--models", &p("empty"), "--only", "centroid"]);
    assert_eq!(no_models.status.code(), Some(5));
}
