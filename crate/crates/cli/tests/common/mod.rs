#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

/// Small architecture and short schedules for end-to-end runs.
pub const TINY: &str = "\
model.layers=2
model.hidden=16
model.patch=4
model.incentive_hidden=16
train.pretrain_steps=8
train.pretrain_batch=64
train.pretrain_warmup=2
train.finetune_epochs=3
train.finetune_batch=64
train.finetune_warmup=2
";

pub struct Run {
    pub code: i32,
    pub stdout: String,
    pub stderr: String,
}

pub fn cmixer(args: &[&str]) -> Run {
    let Output {
        status,
        stdout,
        stderr,
    } = Command::new(env!("CARGO_BIN_EXE_cmixer"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs");
    Run {
        code: status.code().unwrap_or(-1),
        stdout: String::from_utf8_lossy(&stdout).into_owned(),
        stderr: String::from_utf8_lossy(&stderr).into_owned(),
    }
}

pub fn ok(args: &[&str]) -> Run {
    let r = cmixer(args);
    assert_eq!(
        r.code, 0,
        "cmixer {args:?} failed:\n{}{}",
        r.stdout, r.stderr
    );
    r
}

pub fn s(p: &Path) -> &str {
    p.to_str().expect("utf-8 temp path")
}

/// Writes the tiny config and a 2-class synthetic dataset into `dir`.
pub fn setup(dir: &Path) -> (PathBuf, PathBuf) {
    let config = dir.join("tiny.txt");
    fs::write(&config, TINY).unwrap();
    let data_dir = dir.join("data");
    ok(&[
        "synth",
        "--out",
        s(&data_dir),
        "--side",
        "16",
        "--per-class",
        "30",
        "--seed",
        "7",
    ]);
    (config, data_dir.join("synth.npz"))
}

pub fn read(p: &Path) -> String {
    fs::read_to_string(p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

/// Manifest lines that describe settings and artifacts, without the run's
/// own location.
pub fn manifest_body(dir: &Path) -> String {
    read(&dir.join("manifest.txt"))
        .lines()
        .filter(|l| !l.starts_with("manifest.out=") && !l.starts_with("manifest.config="))
        .collect::<Vec<_>>()
        .join("\n")
}

pub fn manifest_value(dir: &Path, key: &str) -> Option<String> {
    read(&dir.join("manifest.txt"))
        .lines()
        .find_map(|l| l.strip_prefix(&format!("{key}=")).map(str::to_string))
}
