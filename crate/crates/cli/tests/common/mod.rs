#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

pub fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

pub fn fx(rel: &str) -> String {
    fixtures().join(rel).display().to_string()
}

pub fn matchforge(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_matchforge"))
        .args(args)
        .env_remove("MATCHFORGE_CONFIG")
        .output()
        .expect("binary runs")
}

pub fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

pub fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

pub fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

pub fn path_str(p: &Path) -> String {
    p.display().to_string()
}

/// `match` on the MIMIC replay fixture, writing to `out`.
pub fn match_mimic(out: &Path, extra: &[&str]) -> Output {
    let cfg = fx("mimic.toml");
    let source = fx("mimic_source.json");
    let target = fx("omop_target.json");
    let out = path_str(out);
    let mut args = vec!["--config", &cfg, "match", "--source", &source, "--target", &target, "--out", &out];
    args.extend_from_slice(extra);
    matchforge(&args)
}

pub fn match_accuracy20(out: &Path, script: &str) -> Output {
    let source = fx("accuracy20/source.json");
    let target = fx("accuracy20/target.json");
    let out = path_str(out);
    matchforge(&[
        "match", "--backend", "scripted", "--script", script, "--source", &source, "--target", &target, "--out", &out,
    ])
}
