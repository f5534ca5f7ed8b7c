#![allow(dead_code)]

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

pub fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_assocnet")
}

pub fn run(args: &[&str]) -> Output {
    Command::new(bin()).args(args).output().expect("spawn assocnet")
}

/// Runs the CLI inside `dir`, so relative paths and the recorded
/// configuration do not depend on where `dir` lives.
pub fn run_in(dir: &Path, args: &[&str]) -> Result<(), String> {
    fs::create_dir_all(dir).map_err(|e| e.to_string())?;
    let out = Command::new(bin()).current_dir(dir).args(args).output().expect("spawn assocnet");
    check_output(args, &out)
}

/// Runs the CLI and returns stderr as the error when it exits non-zero.
pub fn run_ok(args: &[&str]) -> Result<(), String> {
    check_output(args, &run(args))
}

fn check_output(args: &[&str], out: &Output) -> Result<(), String> {
    if out.status.success() {
        Ok(())
    } else {
        Err(format!("assocnet {}: {}", args.join(" "), String::from_utf8_lossy(&out.stderr).trim()))
    }
}

pub fn path(p: &Path) -> &str {
    p.to_str().expect("utf-8 path")
}

/// Every file under `root`, keyed by its relative path. Manifests lose their
/// wall-clock field, the one value allowed to differ between runs.
pub fn snapshot(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
                continue;
            }
            let mut bytes = fs::read(&p).unwrap();
            if p.file_name().is_some_and(|n| n == "manifest.json") {
                let mut v: serde_json::Value = serde_json::from_slice(&bytes).unwrap();
                v.as_object_mut().unwrap().remove("wall_time_seconds");
                bytes = serde_json::to_vec(&v).unwrap();
            }
            out.insert(p.strip_prefix(root).unwrap().to_path_buf(), bytes);
        }
    }
    out
}

/// Names of the files whose bytes differ, or that exist on one side only.
pub fn differences(a: &Path, b: &Path) -> Vec<String> {
    let (sa, sb) = (snapshot(a), snapshot(b));
    let mut diff: Vec<String> = sa
        .iter()
        .filter(|(k, v)| sb.get(*k) != Some(v))
        .map(|(k, _)| k.display().to_string())
        .collect();
    diff.extend(sb.keys().filter(|k| !sa.contains_key(*k)).map(|k| k.display().to_string()));
    diff
}

pub fn read_json(p: &Path) -> serde_json::Value {
    serde_json::from_slice(&fs::read(p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))).unwrap()
}
