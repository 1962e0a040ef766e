use std::path::Path;
use std::process::{Command, Output};

use gfm_cli::config::{normalized, validate_config, PipelineConfig};
use proptest::prelude::*;

fn gfm(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gfm"))
        .args(args)
        .current_dir(dir)
        .env("GFM_LOG_LEVEL", "warn")
        .output()
        .unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn help_exits_zero_and_lists_stages() {
    let tmp = tempfile::tempdir().unwrap();
    let o = gfm(tmp.path(), &["--help"]);
    assert_eq!(o.status.code(), Some(0));
    let text = String::from_utf8(o.stdout).unwrap();
    for stage in ["generate", "preprocess", "write-container", "train", "scale-bench", "hpo", "select-ensemble", "uq-report"] {
        assert!(text.contains(stage), "help lacks {stage}");
    }
    assert!(!text.contains("hpo-trial"), "internal subcommands are hidden");
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    let o = gfm(tmp.path(), &["generate", "--bogus", "3", "--out", "x.xyz"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("--bogus"));
    let o = gfm(tmp.path(), &["frobnicate"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn config_errors_are_all_reported_with_exit_two() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("bad.json");
    std::fs::write(&path, r#"{"model": {"mpnn_layers": 7, "batch_size": 12, "fc_width": "wide"}, "extra": true}"#).unwrap();
    let o = gfm(tmp.path(), &["--config", "bad.json", "config"]);
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert!(err.contains("/model/mpnn_layers: 7 is outside the admissible set {1..6}"), "{err}");
    assert!(err.contains("/model/batch_size: 12 is outside the admissible set {16..128}"), "{err}");
    assert!(err.contains("/model/fc_width"), "{err}");
    assert!(err.contains("/extra: unknown key"), "{err}");
    // the same checks gate every stage, before any work
    let o = gfm(tmp.path(), &["--config", "bad.json", "generate", "--out", "x.xyz"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(!tmp.path().join("x.xyz").exists());
}

#[test]
fn missing_config_file_is_a_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    let o = gfm(tmp.path(), &["--config", "nope.json", "config"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn config_echo_is_a_fixpoint() {
    let tmp = tempfile::tempdir().unwrap();
    std::fs::write(tmp.path().join("c.json"), r#"{"train": {"epochs": 3}}"#).unwrap();
    let first = gfm(tmp.path(), &["--config", "c.json", "config"]);
    assert_eq!(first.status.code(), Some(0));
    std::fs::write(tmp.path().join("echo.json"), &first.stdout).unwrap();
    let second = gfm(tmp.path(), &["--config", "echo.json", "config"]);
    assert_eq!(first.stdout, second.stdout);
    let cfg: PipelineConfig = serde_json::from_slice(&first.stdout).unwrap();
    assert_eq!(cfg.train.epochs, 3);
}

#[test]
fn existing_outputs_need_force() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let gen = ["generate", "--count", "5", "--out", "a.xyz"];
    assert_eq!(gfm(d, &gen).status.code(), Some(0));
    let before = std::fs::read(d.join("a.xyz")).unwrap();
    let o = gfm(d, &["generate", "--count", "7", "--out", "a.xyz"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("--force"));
    assert_eq!(std::fs::read(d.join("a.xyz")).unwrap(), before);
    assert_eq!(gfm(d, &["generate", "--count", "7", "--out", "a.xyz", "--force"]).status.code(), Some(0));
    assert_ne!(std::fs::read(d.join("a.xyz")).unwrap(), before);
}

#[test]
fn preprocess_then_repack() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    assert_eq!(gfm(d, &["generate", "--count", "30", "--out", "raw.xyz"]).status.code(), Some(0));
    let o = gfm(d, &["preprocess", "--in", "raw.xyz", "--subfiles", "3", "--out", "c"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let summary: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(summary["records_in"], 30);
    assert_eq!(std::fs::read_dir(d.join("c")).unwrap().count(), 4);
    let o = gfm(d, &["write-container", "--in", "c", "--subfiles", "1", "--out", "c1"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert_eq!(std::fs::read_dir(d.join("c1")).unwrap().count(), 2);
}

#[test]
fn log_lines_are_json() {
    let tmp = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_gfm"))
        .args(["generate", "--count", "2", "--out", "a.xyz"])
        .current_dir(tmp.path())
        .env("GFM_LOG_LEVEL", "debug")
        .output()
        .unwrap();
    let err = stderr(&o);
    assert!(err.lines().count() >= 2);
    for line in err.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert!(v["fields"]["event"].is_string(), "{line}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    /// In-range model sections validate, and the normalized echo validates to
    /// the same config.
    #[test]
    fn normalized_config_round_trips(
        layers in 1usize..=6,
        width in 100usize..=2000,
        fc_layers in 2usize..=3,
        fc_width in 300usize..=1000,
        batch in 16usize..=128,
        epochs in 0usize..100,
    ) {
        let text = format!(
            r#"{{"model": {{"mpnn_layers": {layers}, "mpnn_width": {width}, "fc_layers": {fc_layers},
                 "fc_width": {fc_width}, "batch_size": {batch}}}, "train": {{"epochs": {epochs}}}}}"#
        );
        let cfg = validate_config(&text).unwrap();
        let echo = normalized(&cfg);
        prop_assert_eq!(validate_config(&echo).unwrap(), cfg.clone());
        prop_assert_eq!(normalized(&validate_config(&echo).unwrap()), echo);
    }

    #[test]
    fn out_of_range_layers_are_named(layers in 7usize..50) {
        let issues = validate_config(&format!(r#"{{"model": {{"mpnn_layers": {layers}}}}}"#)).unwrap_err();
        prop_assert_eq!(issues.len(), 1);
        prop_assert_eq!(&issues[0].pointer, "/model/mpnn_layers");
    }
}

#[test]
fn scale_bench_writes_report_and_phase_table() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    std::fs::write(d.join("m.json"), r#"{"mpnn_width": 8, "fc_width": 8, "batch_size": 4}"#).unwrap();
    let o = gfm(d, &[
        "scale-bench", "--mode", "strong", "--ranks", "1,2", "--samples", "40", "--model", "m.json", "--clock", "thread-cpu",
        "--out", "s.json",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let rep: serde_json::Value = serde_json::from_slice(&std::fs::read(d.join("s.json")).unwrap()).unwrap();
    assert_eq!(rep["rows"].as_array().unwrap().len(), 2);
    let csv = std::fs::read_to_string(d.join("s.phases.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 1 + 2);
    // benchmark models skip the search-space bounds but not structural checks
    std::fs::write(d.join("bad.json"), r#"{"mpnn_layers": 0}"#).unwrap();
    let o = gfm(d, &["scale-bench", "--mode", "strong", "--ranks", "1", "--samples", "4", "--model", "bad.json", "--out", "t.json"]);
    assert_eq!(o.status.code(), Some(2));
}
