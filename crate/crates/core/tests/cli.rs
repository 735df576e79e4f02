use std::path::Path;
use std::process::{Command, Output};

fn xmod(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_xmod"))
        .args(args)
        .env("XMOD_DETERMINISTIC", "1")
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn configs() -> &'static Path {
    Path::new(concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs"))
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn shipped_configs_validate() {
    for name in ["desk.json", "paper.json"] {
        let p = configs().join(name);
        let o = xmod(&["validate", "--config", p.to_str().unwrap()]);
        assert_eq!(o.status.code(), Some(0), "{name}: {}", String::from_utf8_lossy(&o.stdout));
        assert!(o.stdout.is_empty());
    }
}

#[test]
fn invalid_config_names_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("bad.json");
    std::fs::write(&p, r#"{"preset": "desk", "loss": {"lambda3": -1}, "unet": {"batch_size": 0}}"#).unwrap();
    let o = xmod(&["validate", "--config", p.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let out = String::from_utf8_lossy(&o.stdout);
    assert!(out.contains("lambda3"), "{out}");
    assert!(out.contains("unet.batch_size"), "{out}");
}

#[test]
fn preset_conflict_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("c.json");
    std::fs::write(&p, r#"{"preset": "paper", "essnet": {"lr_g": 0.001}}"#).unwrap();
    let o = xmod(&["validate", "--config", p.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stdout).contains("preset paper fixes"));
}

#[test]
fn unknown_key_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("c.json");
    std::fs::write(&p, r#"{"preset": "desk", "learning_rate": 3}"#).unwrap();
    let o = xmod(&["validate", "--config", p.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn pipeline_without_data_is_actionable() {
    let dir = tempfile::tempdir().unwrap();
    let p = configs().join("paper.json");
    let o = xmod(&["pipeline", "--config", p.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert!(stderr(&o).contains("xmod prep"), "{}", stderr(&o));
}

#[test]
fn bad_threshold_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().to_str().unwrap();
    let o = xmod(&["evaluate", "--ckpt", d, "--data", d, "--out", d, "--threshold", "1.5"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn take_requires_synthetic() {
    let o = xmod(&["train-unet", "--config", "x", "--real", "y", "--take", "3", "--out", "z"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn prep_missing_source_is_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope");
    let out = dir.path().join("out");
    let o = xmod(&[
        "prep",
        "--src",
        missing.to_str().unwrap(),
        "--modality",
        "mr",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
}

#[test]
fn phantom_then_wrong_side_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let o = xmod(&["phantom", "--size", "32", "--count", "3", "--style", "a", "--out", a.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(a.join("manifest.json").is_file());
    // a CT-style set is not a valid real MR set
    let o = xmod(&[
        "train-unet",
        "--config",
        configs().join("desk.json").to_str().unwrap(),
        "--real",
        a.to_str().unwrap(),
        "--out",
        dir.path().join("u").to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
}

#[test]
fn summary_prints_totals() {
    let o = xmod(&["summary"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let out = String::from_utf8_lossy(&o.stdout);
    assert!(out.contains("G1+G2+D1+D2: 28256644"), "{out}");
    assert!(out.contains("31030593"), "{out}");
}

#[test]
fn report_of_missing_file_fails() {
    let o = xmod(&["report", "--runs", "/nonexistent/report.json"]);
    assert_ne!(o.status.code(), Some(0));
}
