use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn tiny() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/tiny.toml")
}

fn milab(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_milab"))
        .arg("--config")
        .arg(tiny())
        .arg("--out")
        .arg(out)
        .arg("--single-worker")
        .args(args)
        .output()
        .unwrap()
}

fn stderr_json(o: &Output) -> serde_json::Value {
    let text = String::from_utf8_lossy(&o.stderr);
    let line = text.lines().rev().find(|l| l.starts_with('{')).expect("error JSON on stderr");
    serde_json::from_str(line).unwrap()
}

#[test]
fn invert_before_gan_fails_with_json() {
    let dir = tempfile::tempdir().unwrap();
    assert!(milab(dir.path(), &["train-target"]).status.success());
    let o = milab(dir.path(), &["invert"]);
    assert!(!o.status.success());
    let e = stderr_json(&o);
    assert_eq!(e["error"], "missing_artifact");
    assert!(e["path"].as_str().unwrap().ends_with("generator.ckpt"), "{e}");
    assert!(e["stage"].as_str().unwrap().starts_with("invert"), "{e}");
}

#[test]
fn bad_override_reports_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let o = milab(dir.path(), &["--set", "attack.gmi.lr=-3", "show-config"]);
    assert!(!o.status.success());
    let e = stderr_json(&o);
    assert_eq!(e["error"], "config");
    assert_eq!(e["field"], "attack.gmi.lr");
}

#[test]
fn second_run_prints_cached() {
    let dir = tempfile::tempdir().unwrap();
    assert!(milab(dir.path(), &["train-target"]).status.success());
    let o = milab(dir.path(), &["train-target"]);
    assert!(o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("cached  train-target"));
}

#[test]
fn seed_flag_changes_the_resolved_config() {
    let dir = tempfile::tempdir().unwrap();
    let o = milab(dir.path(), &["--seed", "99", "show-config"]);
    assert!(o.status.success());
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.lines().any(|l| l.trim() == "seed = 99"), "{text}");
}

#[test]
fn full_experiment_prints_table_and_verifies() {
    let dir = tempfile::tempdir().unwrap();
    let o = milab(dir.path(), &["--set", "attack.modes=[\"gmi\"]", "full-experiment"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let table = String::from_utf8(o.stdout).unwrap();
    assert_eq!(table.lines().filter(|l| l.starts_with("| GMI")).count(), 4);
    assert!(milab(dir.path(), &["verify-manifest"]).status.success());
}

#[test]
fn variant_flag_limits_the_stage() {
    let dir = tempfile::tempdir().unwrap();
    let set = ["--set", "attack.modes=[\"gmi\"]"];
    for stage in ["train-target", "distill", "train-gan"] {
        assert!(milab(dir.path(), &[set[0], set[1], stage]).status.success());
    }
    let o = milab(dir.path(), &[set[0], set[1], "--variant", "lomma", "invert"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(dir.path().join("invert/gmi/lomma/result.json").exists());
    assert!(!dir.path().join("invert/gmi/baseline").exists());
}
