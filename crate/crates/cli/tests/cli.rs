mod common;

use std::fs;
use std::path::Path;

use common::{differences, read_json, run, run_in};
use sha2::{Digest, Sha256};

const SIM: &str = r#"{"designs": [{"mode": "PosNeg", "density": "sparse", "symmetry": "symmetric", "pool_size": 10}], "n_sites": 60, "epochs": 20}"#;
const DATA: &str = "sim/PosNeg_sparse_sym_m10";
const QUICK: &str = r#"{"max_epochs": 3}"#;

fn simulated(dir: &Path) {
    run_in(dir, &["--seed", "4", "simulate-community", "--config", SIM, "--out", "sim"]).unwrap();
}

fn code(dir: &Path, args: &[&str]) -> (i32, String) {
    let out = std::process::Command::new(common::bin()).current_dir(dir).args(args).output().unwrap();
    (out.status.code().unwrap(), String::from_utf8_lossy(&out.stderr).into_owned())
}

#[test]
fn help_and_version_succeed() {
    assert!(run(&["--help"]).status.success());
    let out = run(&["--version"]);
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).contains("assocnet"));
}

#[test]
fn usage_and_validation_errors_exit_with_two() {
    let tmp = tempfile::tempdir().unwrap();
    simulated(tmp.path());
    assert_eq!(code(tmp.path(), &["bogus"]).0, 2);
    assert_eq!(code(tmp.path(), &["fit", "--out", "x"]).0, 2);

    let (c, err) = code(tmp.path(), &["fit", "--data", DATA, "--train", r#"{"learning_rat": 1}"#, "--out", "x"]);
    assert_eq!(c, 2);
    assert!(err.contains("learning_rat"), "{err}");

    let (c, err) = code(tmp.path(), &["fit", "--data", DATA, "--mode", "multiplicative", "--family", "poisson", "--out", "x"]);
    assert_eq!(c, 2);
    assert!(err.contains("multiplicative"), "{err}");

    assert_eq!(code(tmp.path(), &["fit", "--data", "missing", "--out", "x"]).0, 2);
    assert_eq!(code(tmp.path(), &["simulate-community", "--preset", "nope", "--out", "x"]).0, 2);
    assert_eq!(code(tmp.path(), &["select", "--data", DATA, "--grid", "nope", "--out", "x"]).0, 2);
}

#[test]
fn divergence_exits_with_three() {
    let tmp = tempfile::tempdir().unwrap();
    simulated(tmp.path());
    let train = r#"{"learning_rate": 1e30, "max_epochs": 3}"#;
    let (c, err) = code(tmp.path(), &["fit", "--data", DATA, "--family", "normal", "--train", train, "--out", "x"]);
    assert_eq!(c, 3, "{err}");
    assert!(err.contains("diverged"));
}

#[test]
fn manifest_describes_the_run() {
    let tmp = tempfile::tempdir().unwrap();
    simulated(tmp.path());
    run_in(tmp.path(), &["--seed", "3", "fit", "--data", DATA, "--train", QUICK, "--out", "fit"]).unwrap();
    let out = tmp.path().join("fit");
    let manifest = read_json(&out.join("manifest.json"));
    assert_eq!(manifest["command"], "fit");
    assert_eq!(manifest["seed"], 3);
    let config = fs::read(out.join("config.json")).unwrap();
    let digest: String = Sha256::digest(&config).iter().map(|b| format!("{b:02x}")).collect();
    assert_eq!(manifest["config_digest"], digest.as_str());
    for file in manifest["outputs"].as_array().unwrap() {
        assert!(out.join(file.as_str().unwrap()).exists(), "{file}");
    }
    let inputs = manifest["inputs"].as_array().unwrap();
    assert!(inputs.iter().any(|i| i["path"].as_str().unwrap().ends_with("abundance.csv")));
}

#[test]
fn reruns_are_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    for copy in ["a", "b"] {
        let dir = tmp.path().join(copy);
        run_in(&dir, &["--jobs", "1", "--seed", "4", "simulate-community", "--config", SIM, "--out", "sim"]).unwrap();
        run_in(&dir, &["--jobs", "1", "--seed", "4", "fit", "--data", DATA, "--train", QUICK, "--out", "fit"]).unwrap();
    }
    assert_eq!(differences(&tmp.path().join("a"), &tmp.path().join("b")), Vec::<String>::new());
}

#[test]
fn other_seeds_change_the_simulation() {
    let tmp = tempfile::tempdir().unwrap();
    for seed in ["1", "2"] {
        run_in(tmp.path(), &["--seed", seed, "simulate-community", "--config", SIM, "--out", seed]).unwrap();
    }
    let a = fs::read(tmp.path().join("1/PosNeg_sparse_sym_m10/abundance.csv")).unwrap();
    let b = fs::read(tmp.path().join("2/PosNeg_sparse_sym_m10/abundance.csv")).unwrap();
    assert_ne!(a, b);
}

#[test]
fn single_cell_grid_selects_that_cell() {
    let tmp = tempfile::tempdir().unwrap();
    simulated(tmp.path());
    let grid = r#"{"dims": [3], "lambdas": [0.02], "folds": 2}"#;
    run_in(tmp.path(), &["select", "--data", DATA, "--grid", grid, "--train", QUICK, "--out", "sel"]).unwrap();
    let best = &read_json(&tmp.path().join("sel/selection.json"))["best"];
    assert_eq!(best["dim"], 3);
    assert_eq!(best["lambda"], 0.02);
    assert!(tmp.path().join("sel/best/response.csv").exists());
    assert!(tmp.path().join("sel/selection.csv").exists());
}

#[test]
fn network_and_evaluate_read_a_fitted_bundle() {
    let tmp = tempfile::tempdir().unwrap();
    simulated(tmp.path());
    run_in(tmp.path(), &["fit", "--data", DATA, "--train", QUICK, "--out", "fit"]).unwrap();
    run_in(tmp.path(), &["network", "--model", "fit", "--out", "net"]).unwrap();
    assert!(tmp.path().join("net/manifest.json").exists());
    let truth = format!("{DATA}/truth.csv");
    run_in(tmp.path(), &["evaluate", "--pred", "fit", "--truth", &truth, "--out", "ev"]).unwrap();
    let report = read_json(&tmp.path().join("ev/report.json"));
    assert!(report.is_object());
    assert!(fs::read_dir(tmp.path().join("ev")).unwrap().count() >= 3);
}

#[test]
fn foodweb_simulation_writes_every_topology() {
    let tmp = tempfile::tempdir().unwrap();
    run_in(tmp.path(), &["simulate-foodweb", "--config", r#"{"n_sites": 40}"#, "--out", "fw"]).unwrap();
    for topology in ["anarchy", "democracy", "cascade", "gcascade", "niche", "pniche"] {
        let dir = tmp.path().join("fw").join(topology);
        for file in ["abundance.csv", "covariates.csv", "groups.csv", "metaweb.csv", "realized.csv"] {
            assert!(dir.join(file).exists(), "{topology}/{file}");
        }
    }
}

#[test]
fn full_experiment_one_preset_writes_all_designs() {
    let tmp = tempfile::tempdir().unwrap();
    run_in(tmp.path(), &["simulate-community", "--preset", "exp1-full", "--out", "exp1"]).unwrap();
    let designs = fs::read_dir(tmp.path().join("exp1")).unwrap().filter(|e| e.as_ref().unwrap().path().is_dir()).count();
    assert_eq!(designs, 33);
}
