use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = "seed = 11\nrounds = 2\ntask.layers = 64,64\n";

fn emar(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_emar"))
        .args(args)
        .env_remove("EMAR_OUT_DIR")
        .output()
        .expect("spawn emar")
}

fn write_config(dir: &Path, text: &str) -> String {
    let path = dir.join("exp.cfg");
    fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn validate_good_config_writes_nothing() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), SMALL);
    let out = emar(&["validate-config", "--config", &cfg]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let entries: Vec<_> = fs::read_dir(tmp.path()).unwrap().collect();
    assert_eq!(entries.len(), 1);
}

#[test]
fn bad_config_exits_with_one() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "seed = 1\ntopology.packet_loss = 0.5\n");
    let out = emar(&["validate-config", "--config", &cfg]);
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("topology.packet_loss"), "{stderr}");

    let cfg = write_config(tmp.path(), "seed = 1\nno.such.key = 3\n");
    assert_eq!(emar(&["validate-config", "--config", &cfg]).status.code(), Some(1));
    let missing = tmp.path().join("absent.cfg");
    let out = emar(&["validate-config", "--config", missing.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn run_writes_one_row_per_round() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), SMALL);
    let dir = tmp.path().join("out");
    let out = emar(&["run", "--config", &cfg, "--seed", "5", "--out", dir.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let rounds = fs::read_to_string(dir.join("rounds.csv")).unwrap();
    assert_eq!(rounds.lines().count(), 3);
    let manifest = fs::read_to_string(dir.join("manifest.txt")).unwrap();
    assert!(manifest.contains("seed = 5"), "{manifest}");
}

#[test]
fn out_dir_defaults_to_environment() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), SMALL);
    let dir = tmp.path().join("from-env");
    let out = Command::new(env!("CARGO_BIN_EXE_emar"))
        .args(["run", "--config", &cfg])
        .env("EMAR_OUT_DIR", &dir)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.join("rounds.csv").exists());

    // Neither flag, variable nor config key.
    assert_eq!(emar(&["run", "--config", &cfg]).status.code(), Some(1));
}

#[test]
fn repeated_runs_are_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), SMALL);
    let read = |name: &str| {
        let dir = tmp.path().join(name);
        let out = emar(&["run", "--config", &cfg, "--out", dir.to_str().unwrap()]);
        assert_eq!(out.status.code(), Some(0));
        fs::read(dir.join("rounds.csv")).unwrap()
    };
    assert_eq!(read("a"), read("b"));
}

#[test]
fn sweep_makes_one_directory_per_value() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), SMALL);
    let root = tmp.path().join("sweep");
    let values = ["0.01", "0.05", "0.10", "0.15", "0.20"];
    let joined = values.join(",");
    let out = emar(&[
        "sweep", "--config", &cfg, "--param", "corruption_rate", "--values", &joined, "--out",
        root.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let dirs: Vec<_> = fs::read_dir(&root)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_dir())
        .collect();
    assert_eq!(dirs.len(), values.len());
    let mut seeds = Vec::new();
    for v in values {
        let dir = root.join(format!("corruption_rate={v}"));
        let manifest = fs::read_to_string(dir.join("manifest.txt")).unwrap();
        let seed = manifest
            .lines()
            .find_map(|l| l.strip_prefix("seed = "))
            .unwrap()
            .to_string();
        seeds.push(seed);
    }
    seeds.sort();
    seeds.dedup();
    assert_eq!(seeds.len(), values.len());
}

#[test]
fn sweep_value_out_of_range_is_a_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), SMALL);
    let root = tmp.path().join("sweep");
    let out = emar(&[
        "sweep", "--config", &cfg, "--param", "corruption_rate", "--values", "0.1,7", "--out",
        root.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(!root.exists());
}

#[test]
fn unwritable_output_is_a_runtime_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), SMALL);
    // A regular file where the output directory should go.
    let blocker = tmp.path().join("taken");
    fs::write(&blocker, "").unwrap();
    let out = emar(&["run", "--config", &cfg, "--out", blocker.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
}
