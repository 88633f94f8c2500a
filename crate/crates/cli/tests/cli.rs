use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_mfg-horizon"));
    c.env_remove("MFG_SEED").env("RUST_LOG", "warn");
    c
}

fn scratch(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("mfg-cli-{}-{name}", std::process::id()));
    let _ = fs::remove_dir_all(&dir);
    fs::create_dir_all(&dir).unwrap();
    dir
}

fn write_config(dir: &Path, body: &str) -> PathBuf {
    let p = dir.join("config.json");
    fs::write(&p, body).unwrap();
    p
}

fn manifest(dir: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap()
}

#[test]
fn check_mode_exits_zero() {
    let dir = scratch("check");
    let cfg = write_config(&dir, r#"{"game": "gaussian-repulsion", "seed": 1, "check_samples": 100}"#);
    let out = dir.join("out");
    let status = bin().args(["check", "--config"]).arg(&cfg).arg("--out").arg(&out).status().unwrap();
    assert_eq!(status.code(), Some(0));
    assert!(out.join("assumptions.json").exists());
    assert_eq!(manifest(&out)["status"], "ok");
    fs::remove_dir_all(dir).unwrap();
}

#[test]
fn schema_violation_exits_one_with_field_path() {
    let dir = scratch("schema");
    let cfg = write_config(&dir, r#"{"game": "constant-reward", "seed": 1, "tol_fp": "small"}"#);
    let out = dir.join("out");
    let status = bin().args(["solve", "--config"]).arg(&cfg).arg("--out").arg(&out).status().unwrap();
    assert_eq!(status.code(), Some(1));
    let m = manifest(&out);
    assert_eq!(m["status"], "error");
    assert!(m["error"].as_str().unwrap().contains("tol_fp"));
    fs::remove_dir_all(dir).unwrap();
}

#[test]
fn unknown_mode_exits_one() {
    let dir = scratch("mode");
    let cfg = write_config(&dir, r#"{"game": "constant-reward", "seed": 1}"#);
    let status = bin().args(["plot", "--config"]).arg(&cfg).arg("--out").arg(dir.join("o")).status().unwrap();
    assert_eq!(status.code(), Some(1));
    fs::remove_dir_all(dir).unwrap();
}

#[test]
fn env_seed_overrides_config_and_flag_overrides_env() {
    let dir = scratch("seed");
    let cfg = write_config(&dir, r#"{"game": "gaussian-repulsion", "seed": 1, "check_samples": 50}"#);
    let (a, b) = (dir.join("a"), dir.join("b"));
    bin().env("MFG_SEED", "77").args(["check", "--config"]).arg(&cfg).arg("--out").arg(&a).status().unwrap();
    bin()
        .env("MFG_SEED", "77")
        .args(["check", "--seed", "5", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&b)
        .status()
        .unwrap();
    assert_eq!(manifest(&a)["seed"], 77);
    assert_eq!(manifest(&b)["seed"], 5);
    fs::remove_dir_all(dir).unwrap();
}

#[test]
fn flagged_run_exits_two() {
    let dir = scratch("flag");
    let cfg = write_config(
        &dir,
        r#"{"game": {"preset": "clipped-ou-invariant", "coefficients": {"drift_x": 0.0}}, "seed": 0}"#,
    );
    let out = dir.join("out");
    let status = bin().args(["stationary", "--config"]).arg(&cfg).arg("--out").arg(&out).status().unwrap();
    assert_eq!(status.code(), Some(2));
    assert_eq!(manifest(&out)["status"], "flagged");
    fs::remove_dir_all(dir).unwrap();
}

#[test]
fn outputs_do_not_depend_on_worker_count() {
    let dir = scratch("workers");
    let cfg = write_config(
        &dir,
        r#"{"game": "gaussian-repulsion", "seed": 4, "paths": 3000, "dt": 0.1, "t_max": 2.0, "max_iter": 8}"#,
    );
    let (a, b) = (dir.join("w1"), dir.join("w3"));
    for (out, w) in [(&a, "1"), (&b, "3")] {
        let status = bin()
            .args(["finite-solve", "--workers", w, "--config"])
            .arg(&cfg)
            .arg("--out")
            .arg(out)
            .status()
            .unwrap();
        assert!(matches!(status.code(), Some(0) | Some(2)));
    }
    assert_eq!(manifest(&a)["outputs"], manifest(&b)["outputs"]);
    assert_eq!(manifest(&b)["workers"], 3);
    assert_eq!(
        fs::read(a.join("equilibrium.csv")).unwrap(),
        fs::read(b.join("equilibrium.csv")).unwrap()
    );
    fs::remove_dir_all(dir).unwrap();
}

#[test]
fn oracle_rerun_is_byte_identical() {
    let dir = scratch("oracle");
    let cfg = write_config(&dir, r#"{"game": "discrete-oracle", "seed": 0}"#);
    let (a, b) = (dir.join("a"), dir.join("b"));
    for out in [&a, &b] {
        let status = bin().args(["oracle", "--config"]).arg(&cfg).arg("--out").arg(out).status().unwrap();
        assert_eq!(status.code(), Some(0));
    }
    assert_eq!(
        fs::read(a.join("oracle_equilibrium.csv")).unwrap(),
        fs::read(b.join("oracle_equilibrium.csv")).unwrap()
    );
    fs::remove_dir_all(dir).unwrap();
}
