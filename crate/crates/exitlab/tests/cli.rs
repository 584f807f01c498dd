//! End-to-end tests of the command-line binary: artifact layout,
//! overwrite and resume semantics, error paths, and exit codes.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_exitlab"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn run_ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(
        out.status.success(),
        "command {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn run_err(args: &[&str]) -> String {
    let out = run(args);
    assert!(!out.status.success(), "command {args:?} unexpectedly succeeded");
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// A config tiny enough that train runs in well under a second.
fn tiny_config(dir: &Path, edits: &[(&str, serde_json::Value)]) -> PathBuf {
    let mut config = serde_json::json!({
        "data": {"spec": {
            "classes": 2, "d_in": 4, "n_train": 300, "n_dev": 100, "n_test": 150,
            "easy_fraction": 0.7, "easy_margin": 6.0, "hard_margin": 1.5,
            "label_noise": 0.0, "shift": null, "seed": 5
        }},
        "model": {"layers": 3, "classes": 2, "d_in": 4, "d_hidden": 12,
                  "d_proto": 6, "seed": 5},
        "train": {"batch_size": 16, "lr": 0.01, "total_steps": 150,
                  "eval_every": 50, "seed": 5, "dar": {"alpha": 0.01}},
        "policies": [{"kind": "edr", "lambda": 1.0}, {"kind": "entropy"},
                     {"kind": "oracle"}],
        "taus": [0.05, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9],
        "diagnose_layers": [1, 2],
        "diagnose_taus": [0.2]
    });
    for (pointer, value) in edits {
        *config.pointer_mut(pointer).expect("edit path exists") = value.clone();
    }
    let path = dir.join("config.json");
    fs::write(&path, serde_json::to_string_pretty(&config).unwrap()).unwrap();
    path
}

fn train_checkpoint(dir: &Path, config: &Path) -> PathBuf {
    let out = dir.join("train");
    run_ok(&[
        "train",
        "--config",
        config.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--create-dirs",
    ]);
    out.join("best.ckpt")
}

#[test]
fn gen_is_reproducible_and_respects_overwrite() {
    let dir = tempfile::tempdir().unwrap();
    let config = tiny_config(dir.path(), &[]);
    let out = dir.path().join("data");
    let args = ["gen", "--config", config.to_str().unwrap(), "--out", out.to_str().unwrap()];

    run_ok(&[&args[..], &["--create-dirs"]].concat());
    let first: Vec<Vec<u8>> = ["train.jsonl", "dev.jsonl", "test.jsonl"]
        .iter()
        .map(|f| fs::read(out.join(f)).unwrap())
        .collect();

    let stderr = run_err(&args);
    assert!(stderr.contains("already exists"), "{stderr}");

    run_ok(&[&args[..], &["--overwrite"]].concat());
    for (name, before) in ["train.jsonl", "dev.jsonl", "test.jsonl"].iter().zip(&first) {
        assert_eq!(&fs::read(out.join(name)).unwrap(), before, "{name} changed across reruns");
    }
    let echo: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("config_echo_gen.json")).unwrap())
            .unwrap();
    assert!(echo["hash"].as_str().unwrap().len() == 64);
}

#[test]
fn gen_requires_an_existing_or_created_out_dir() {
    let dir = tempfile::tempdir().unwrap();
    let config = tiny_config(dir.path(), &[]);
    let missing = dir.path().join("absent");
    let stderr = run_err(&[
        "gen",
        "--config",
        config.to_str().unwrap(),
        "--out",
        missing.to_str().unwrap(),
    ]);
    assert!(stderr.contains("does not exist"), "{stderr}");
    assert!(!missing.exists());
}

#[test]
fn gen_rejects_invalid_dataset_spec() {
    let dir = tempfile::tempdir().unwrap();
    let config = tiny_config(dir.path(), &[("/data/spec/n_train", serde_json::json!(0))]);
    let stderr = run_err(&[
        "gen",
        "--config",
        config.to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert!(stderr.contains("split sizes"), "{stderr}");
}

#[test]
fn train_writes_all_four_artifacts_and_echo() {
    let dir = tempfile::tempdir().unwrap();
    let config = tiny_config(dir.path(), &[]);
    let out = dir.path().join("train");
    run_ok(&[
        "train",
        "--config",
        config.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--create-dirs",
    ]);
    for name in ["best.ckpt", "final.ckpt", "train_report.csv", "train_report.json"] {
        assert!(out.join(name).is_file(), "{name} missing");
    }
    assert!(out.join("config_echo_train.json").is_file(), "echo missing");
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("train_report.json")).unwrap()).unwrap();
    assert_eq!(report["records"].as_array().unwrap().len(), 150);
    let csv = fs::read_to_string(out.join("train_report.csv")).unwrap();
    assert!(csv.starts_with("step,lr,loss,"), "{}", &csv[..60.min(csv.len())]);
}

#[test]
fn resume_with_no_remaining_steps_reproduces_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let config = tiny_config(dir.path(), &[]);
    let first = dir.path().join("first");
    run_ok(&[
        "train",
        "--config",
        config.to_str().unwrap(),
        "--out",
        first.to_str().unwrap(),
        "--create-dirs",
    ]);
    let resumed = dir.path().join("resumed");
    run_ok(&[
        "train",
        "--config",
        config.to_str().unwrap(),
        "--out",
        resumed.to_str().unwrap(),
        "--create-dirs",
        "--resume",
        first.join("final.ckpt").to_str().unwrap(),
    ]);
    assert_eq!(
        fs::read(first.join("final.ckpt")).unwrap(),
        fs::read(resumed.join("final.ckpt")).unwrap(),
        "final checkpoint should pass through unchanged"
    );
    assert_eq!(
        fs::read(resumed.join("best.ckpt")).unwrap(),
        fs::read(resumed.join("final.ckpt")).unwrap(),
        "with no new steps the best state is the resumed state"
    );
}

#[test]
fn resume_rejects_conflicting_model_shape() {
    let dir = tempfile::tempdir().unwrap();
    let config = tiny_config(dir.path(), &[]);
    let ckpt = train_checkpoint(dir.path(), &config);
    let wider = tiny_config(
        &dir.path().join("."),
        &[("/model/d_hidden", serde_json::json!(16))],
    );
    let stderr = run_err(&[
        "train",
        "--config",
        wider.to_str().unwrap(),
        "--out",
        dir.path().join("resume2").to_str().unwrap(),
        "--create-dirs",
        "--resume",
        ckpt.to_str().unwrap(),
    ]);
    assert!(stderr.contains("conflicts"), "{stderr}");
}

#[test]
fn sweep_writes_per_policy_csv_figures_and_oracle_point() {
    let dir = tempfile::tempdir().unwrap();
    let config = tiny_config(dir.path(), &[]);
    let ckpt = train_checkpoint(dir.path(), &config);
    let out = dir.path().join("sweep");
    run_ok(&[
        "sweep",
        "--config",
        config.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--create-dirs",
        "--checkpoint",
        ckpt.to_str().unwrap(),
    ]);
    let edr = fs::read_to_string(out.join("sweep_edr_lambda_1.csv")).unwrap();
    assert_eq!(edr.lines().count(), 11, "header plus one row per threshold");
    assert!(out.join("sweep_entropy.csv").is_file());
    assert!(out.join("sweep_oracle.csv").is_file());
    let svg = fs::read_to_string(out.join("tradeoff.svg")).unwrap();
    assert!(svg.contains(">edr_lambda_1</text>"));
    assert!(svg.contains(">entropy</text>"));
    assert!(svg.contains(">oracle</text>"));
    for tau in ["0.14", "0.4", "0.65"] {
        assert!(out.join(format!("exit_hist_tau_{tau}.svg")).is_file());
    }
}

#[test]
fn sweep_with_single_threshold_yields_single_row() {
    let dir = tempfile::tempdir().unwrap();
    let config = tiny_config(
        dir.path(),
        &[
            ("/taus", serde_json::json!([0.4])),
            ("/policies", serde_json::json!([{"kind": "entropy"}])),
        ],
    );
    let ckpt = train_checkpoint(dir.path(), &config);
    let out = dir.path().join("sweep");
    run_ok(&[
        "sweep",
        "--config",
        config.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--create-dirs",
        "--checkpoint",
        ckpt.to_str().unwrap(),
    ]);
    let csv = fs::read_to_string(out.join("sweep_entropy.csv")).unwrap();
    assert_eq!(csv.lines().count(), 2);
    let svg = fs::read_to_string(out.join("tradeoff.svg")).unwrap();
    assert!(svg.contains("<circle"), "single point renders as a dot");
}

#[test]
fn sweep_fails_before_writing_anything_when_checkpoint_is_missing() {
    let dir = tempfile::tempdir().unwrap();
    let config = tiny_config(dir.path(), &[]);
    let out = dir.path().join("sweep");
    let stderr = run_err(&[
        "sweep",
        "--config",
        config.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--create-dirs",
        "--checkpoint",
        dir.path().join("nothere.ckpt").to_str().unwrap(),
    ]);
    assert!(stderr.contains("does not exist"), "{stderr}");
    let leftovers: Vec<_> = fs::read_dir(&out).unwrap().collect();
    assert!(leftovers.is_empty(), "no artifacts on failure: {leftovers:?}");
}

#[test]
fn compare_emits_table_and_marks_unreachable_targets() {
    let dir = tempfile::tempdir().unwrap();
    let config = tiny_config(
        dir.path(),
        &[("/policies", serde_json::json!([{"kind": "entropy"}]))],
    );
    let ckpt = train_checkpoint(dir.path(), &config);
    let out = dir.path().join("cmp");
    run_ok(&[
        "compare",
        "--config",
        config.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--create-dirs",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--target",
        "2.0",
    ]);
    let csv = fs::read_to_string(out.join("comparison.csv")).unwrap();
    assert_eq!(csv.lines().count(), 2, "one policy, one target:\n{csv}");

    // a 3-layer model cannot reach 9x, yet the command still succeeds
    let out2 = dir.path().join("cmp2");
    run_ok(&[
        "compare",
        "--config",
        config.to_str().unwrap(),
        "--out",
        out2.to_str().unwrap(),
        "--create-dirs",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--target",
        "9.0",
    ]);
    let rows: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out2.join("comparison.json")).unwrap()).unwrap();
    assert_eq!(rows[0]["status"], "unavailable");
    assert!(rows[0]["accuracy"].is_null());
}

#[test]
fn diagnose_writes_correctness_rows_and_optional_correlation() {
    let dir = tempfile::tempdir().unwrap();
    let config = tiny_config(dir.path(), &[]);
    let ckpt = train_checkpoint(dir.path(), &config);

    let out = dir.path().join("diag");
    let output = run_ok(&[
        "diagnose",
        "--config",
        config.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--create-dirs",
        "--checkpoint",
        ckpt.to_str().unwrap(),
    ]);
    let csv = fs::read_to_string(out.join("correctness.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3, "two layers at one threshold:\n{csv}");
    assert!(!out.join("spearman.csv").exists());
    let stdout = String::from_utf8_lossy(&output.stdout);
    assert!(stdout.contains("correlation section omitted"), "{stdout}");

    // a second model trained without the regularizer enables the section
    let plain_config = tiny_config(
        &dir.path().join("."),
        &[("/train/dar", serde_json::json!({"alpha": 0.0}))],
    );
    let plain = dir.path().join("plain");
    run_ok(&[
        "train",
        "--config",
        plain_config.to_str().unwrap(),
        "--out",
        plain.to_str().unwrap(),
        "--create-dirs",
    ]);
    let out2 = dir.path().join("diag2");
    run_ok(&[
        "diagnose",
        "--config",
        config.to_str().unwrap(),
        "--out",
        out2.to_str().unwrap(),
        "--create-dirs",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--checkpoint-no-proto",
        plain.join("best.ckpt").to_str().unwrap(),
    ]);
    let spearman = fs::read_to_string(out2.join("spearman.csv")).unwrap();
    assert_eq!(spearman.lines().count(), 3);
    assert!(spearman.starts_with("layer,with_prototypes,without_prototypes"));
}

#[test]
fn diagnose_rejects_the_final_layer() {
    let dir = tempfile::tempdir().unwrap();
    let config = tiny_config(dir.path(), &[("/diagnose_layers", serde_json::json!([3]))]);
    let stderr = run_err(&[
        "diagnose",
        "--config",
        config.to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
        "--checkpoint",
        dir.path().join("irrelevant.ckpt").to_str().unwrap(),
    ]);
    assert!(stderr.contains("diagnose_layers"), "{stderr}");
}

#[test]
fn shift_with_zero_translation_is_a_fixed_point() {
    let dir = tempfile::tempdir().unwrap();
    let config = tiny_config(
        dir.path(),
        &[
            ("/data/spec/easy_fraction", serde_json::json!(1.0)),
            ("/data/spec/easy_margin", serde_json::json!(10.0)),
            ("/data/spec/shift", serde_json::json!([0.0, 0.0, 0.0, 0.0])),
        ],
    );
    let ckpt = train_checkpoint(dir.path(), &config);
    let out = dir.path().join("shift");
    run_ok(&[
        "shift",
        "--config",
        config.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--create-dirs",
        "--checkpoint",
        ckpt.to_str().unwrap(),
    ]);
    let rows: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("shift_report.json")).unwrap()).unwrap();
    assert_eq!(rows.as_array().unwrap().len(), 2);
    assert_eq!(rows[0]["condition"], "before");
    assert_eq!(rows[1]["condition"], "after");
    assert_eq!(rows[0]["tau"], rows[1]["tau"], "both conditions share one threshold");
    let before = rows[0]["accuracy"].as_f64().unwrap();
    let after = rows[1]["accuracy"].as_f64().unwrap();
    assert!((before - after).abs() <= 1e-6, "before {before} vs after {after}");
}

#[test]
fn shift_reports_both_conditions_unless_adjustment_is_disabled() {
    let dir = tempfile::tempdir().unwrap();
    let config = tiny_config(
        dir.path(),
        &[("/data/spec/shift", serde_json::json!([1.0, 1.0, 0.0, 0.0]))],
    );
    let ckpt = train_checkpoint(dir.path(), &config);
    let out = dir.path().join("shift");
    run_ok(&[
        "shift",
        "--config",
        config.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--create-dirs",
        "--checkpoint",
        ckpt.to_str().unwrap(),
    ]);
    let csv = fs::read_to_string(out.join("shift_report.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3, "{csv}");

    let out2 = dir.path().join("shift_only_before");
    run_ok(&[
        "shift",
        "--config",
        config.to_str().unwrap(),
        "--out",
        out2.to_str().unwrap(),
        "--create-dirs",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--no-adjust",
    ]);
    let csv = fs::read_to_string(out2.join("shift_report.csv")).unwrap();
    assert_eq!(csv.lines().count(), 2, "{csv}");
    assert!(csv.contains("before"));
    assert!(!csv.contains("after"));
}

#[test]
fn pipeline_stages_share_one_output_directory() {
    let dir = tempfile::tempdir().unwrap();
    let config = tiny_config(dir.path(), &[]);
    let out = dir.path().join("run");
    let cfg = config.to_str().unwrap();
    let out_s = out.to_str().unwrap();

    run_ok(&["gen", "--config", cfg, "--out", out_s, "--create-dirs"]);
    run_ok(&["train", "--config", cfg, "--out", out_s]);
    let ckpt = out.join("best.ckpt");
    let ckpt_s = ckpt.to_str().unwrap();
    run_ok(&["sweep", "--config", cfg, "--out", out_s, "--checkpoint", ckpt_s]);
    run_ok(&["compare", "--config", cfg, "--out", out_s, "--checkpoint", ckpt_s]);
    run_ok(&["diagnose", "--config", cfg, "--out", out_s, "--checkpoint", ckpt_s]);

    for command in ["gen", "train", "sweep", "compare", "diagnose"] {
        let echo = out.join(format!("config_echo_{command}.json"));
        assert!(echo.is_file(), "missing provenance for {command}");
    }
}

#[test]
fn unknown_config_fields_fail_loudly() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("config.json");
    fs::write(&path, r#"{"tuas": [0.5]}"#).unwrap();
    let stderr = run_err(&[
        "gen",
        "--config",
        path.to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert!(stderr.contains("tuas"), "{stderr}");

    fs::write(&path, r#"{"model": {"proto_dim": 6}}"#).unwrap();
    let stderr = run_err(&[
        "gen",
        "--config",
        path.to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert!(stderr.contains("proto_dim"), "{stderr}");
}
