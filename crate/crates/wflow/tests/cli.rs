//! End-to-end runs of the `wflow` binary.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn scratch(name: &str) -> PathBuf {
    let d = std::env::temp_dir().join(format!("wflow-cli-{}-{name}", std::process::id()));
    let _ = std::fs::remove_dir_all(&d);
    std::fs::create_dir_all(&d).unwrap();
    d
}

fn wflow(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_wflow")).args(args).env_remove("WFLOW_THREADS").output().unwrap()
}

fn write_config(dir: &Path, text: &str) -> String {
    let p = dir.join("run.toml");
    std::fs::write(&p, text).unwrap();
    p.to_string_lossy().into_owned()
}

const SGF: &str = "seed = 9
[energy]
preset = \"entropy\"
[dynamics]
steps = 500
stride = 50
ensemble = 3
resample_pool = 256
";

#[test]
fn validate_basis_runs_without_a_config() {
    let dir = scratch("basis");
    let out = wflow(&["validate-basis", "--K", "6", "--out", dir.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).trim_end().ends_with("PASS"));
    assert!(dir.join("gram.csv").exists());
    assert!(dir.join("validate-basis.manifest.json").exists());
}

#[test]
fn configuration_errors_exit_with_two_and_name_the_key() {
    let dir = scratch("bad");
    let cfg = write_config(&dir, "[energy]\npreset = \"entropy\"\n[dynamics]\ndt = -1.0\n");
    let out = wflow(&["sgf", "--config", &cfg, "--out", dir.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("dynamics.dt"));
    let cfg = write_config(&dir, "[energy]\npreset = \"entropy\"\nbogus = 1\n");
    let out = wflow(&["energy", "--config", &cfg]);
    assert_eq!(out.status.code(), Some(2));
    let out = wflow(&["validate-basis", "--seed", "18446744073709551615", "--out", dir.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("seed"));
}

#[test]
fn worker_count_does_not_change_outputs() {
    let dir = scratch("threads");
    let cfg = write_config(&dir, SGF);
    let mut files = Vec::new();
    for t in ["1", "2"] {
        let out_dir = dir.join(format!("t{t}"));
        let out = wflow(&["sgf", "--config", &cfg, "--threads", t, "--out", out_dir.to_str().unwrap()]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        files.push(std::fs::read(out_dir.join("trajectory.csv")).unwrap());
    }
    assert_eq!(files[0], files[1]);
}

#[test]
fn manifest_replays_the_run() {
    let dir = scratch("replay");
    let cfg = write_config(&dir, SGF);
    let first = dir.join("first");
    assert!(wflow(&["sgf", "--config", &cfg, "--out", first.to_str().unwrap()]).status.success());
    let manifest = first.join("sgf.manifest.json");
    let second = dir.join("second");
    let out = wflow(&["sgf", "--config", manifest.to_str().unwrap(), "--out", second.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(std::fs::read(first.join("trajectory.csv")).unwrap(), std::fs::read(second.join("trajectory.csv")).unwrap());
    let a: serde_json::Value = serde_json::from_slice(&std::fs::read(&manifest).unwrap()).unwrap();
    let b: serde_json::Value = serde_json::from_slice(&std::fs::read(second.join("sgf.manifest.json")).unwrap()).unwrap();
    assert_eq!(a["outputs"][0]["sha256"], b["outputs"][0]["sha256"]);
}

#[test]
fn seed_flag_changes_the_path() {
    let dir = scratch("seed");
    let cfg = write_config(&dir, SGF);
    let mut files = Vec::new();
    for s in ["1", "2"] {
        let out_dir = dir.join(format!("s{s}"));
        assert!(wflow(&["sgf", "--config", &cfg, "--seed", s, "--out", out_dir.to_str().unwrap()]).status.success());
        files.push(std::fs::read(out_dir.join("trajectory.csv")).unwrap());
    }
    assert_ne!(files[0], files[1]);
}
