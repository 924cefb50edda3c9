use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use pitlab::experiment::{Manifest, StageName, StageStatus, MANIFEST};

fn tiny_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/tiny.toml")
}

fn pitlab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pitlab"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn run_dir(out: &Output) -> PathBuf {
    PathBuf::from(String::from_utf8(out.stdout.clone()).unwrap().trim())
}

#[test]
fn unknown_subcommand_is_a_usage_error() {
    let out = pitlab(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
    assert_eq!(pitlab(&["gen-data", "--config", "x.toml", "--bogus"]).status.code(), Some(2));
    assert_eq!(pitlab(&["train", "nonsense", "--config", "x.toml"]).status.code(), Some(2));
}

#[test]
fn version_reports_formats() {
    let out = pitlab(&["--version"]);
    assert_eq!(out.status.code(), Some(0));
    let s = String::from_utf8(out.stdout).unwrap();
    assert!(s.contains("config schema 1") && s.contains("checkpoint format 1"), "{s}");
}

#[test]
fn invalid_config_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "schema_version = 1\nseed = 1\nunknown_key = 3\n").unwrap();
    let out = pitlab(&["gen-data", "--config", cfg.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3));
    let missing = dir.path().join("absent.toml");
    let out = pitlab(&["gen-data", "--config", missing.to_str().unwrap()]);
    assert_ne!(out.status.code(), Some(0));
}

#[test]
fn stage_only_without_inputs_exits_4() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config();
    let args = ["train", "rm-gap", "--stage-only", "--config", cfg.to_str().unwrap(), "--out", dir.path().to_str().unwrap()];
    let out = pitlab(&args);
    assert_eq!(out.status.code(), Some(4), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn single_stages_chain_through_the_run_directory() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config();
    let (c, o) = (cfg.to_str().unwrap(), dir.path().to_str().unwrap());
    let out = pitlab(&["gen-data", "--config", c, "--out", o]);
    assert!(out.status.success());
    let run = run_dir(&out);
    assert!(run.join("data/dataset.jsonl").is_file());
    assert!(pitlab(&["train", "sft-pit", "--stage-only", "--config", c, "--out", o]).status.success());
    assert!(run.join("ckpt/sft_pit.ckpt").is_file());
    assert!(!run.join("ckpt/sft_policy.ckpt").exists());
    // without --stage-only the missing upstream stages run first
    let out = pitlab(&["eval", "region-trace", "--config", c, "--out", o]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(run.join("reports/region_trace.csv").is_file());
}

#[test]
fn run_all_twice_gives_identical_manifests() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let cfg = tiny_config();
    let oa = pitlab(&["run-all", "--config", cfg.to_str().unwrap(), "--out", a.path().to_str().unwrap()]);
    let ob = pitlab(&["run-all", "--config", cfg.to_str().unwrap(), "--out", b.path().to_str().unwrap()]);
    assert!(oa.status.success() && ob.status.success());
    let (da, db) = (run_dir(&oa), run_dir(&ob));
    let (ma, mb) = (std::fs::read(da.join(MANIFEST)).unwrap(), std::fs::read(db.join(MANIFEST)).unwrap());
    assert_eq!(ma, mb);
    let m = Manifest::load(&da.join(MANIFEST)).unwrap();
    assert!(m.verify(&da).unwrap().is_empty());
    assert_eq!(m.stages.len(), StageName::ALL.len());
    assert!(m.stages.values().all(|s| *s != StageStatus::Failed));
}

#[test]
fn seed_flag_and_ablation_select_a_different_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config();
    let (c, o) = (cfg.to_str().unwrap(), dir.path().to_str().unwrap());
    let base = run_dir(&pitlab(&["gen-data", "--config", c, "--out", o]));
    let seeded = run_dir(&pitlab(&["gen-data", "--config", c, "--out", o, "--seed", "99"]));
    assert_ne!(base, seeded);
    let out = pitlab(&["train", "rl-pit", "--config", c, "--out", o, "--ablation", "first-rl-only"]);
    assert!(out.status.success());
    let abl = run_dir(&out);
    assert!(abl.join("ckpt/rl_pit_r0.ckpt").is_file());
    assert!(!abl.join("ckpt/rl_pit_r1.ckpt").exists());
    let m = Manifest::load(&abl.join(MANIFEST)).unwrap();
    assert_eq!(m.pit_plan, vec![0]);
}
