//! End-to-end checks of the command-line pipeline, driving the real binary.

use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_protoclass"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn assert_ok(out: &Output, what: &str) {
    assert!(
        out.status.success(),
        "{what} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn write_world_config(path: &Path, seed: u64) {
    std::fs::write(
        path,
        format!(
            r#"{{
  "n_categories": 10,
  "feature_dim": 32,
  "text_dim": 32,
  "visual_dim": 32,
  "classname_noise": 0.8,
  "description_noise": 0.3,
  "visual_noise": 0.35,
  "object_noise": 0.4,
  "refs_per_category": {{"fixed": 5}},
  "novel_fraction": 0.0,
  "objects_per_category": 30,
  "seed": {seed}
}}"#
        ),
    )
    .unwrap();
}

#[test]
fn pipeline_reaches_high_accuracy() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write_world_config(&d.join("world.json"), 7);
    std::fs::write(
        d.join("train.json"),
        r#"{"learning_rate": 0.001, "epochs": 25, "batch_size": 64, "seed": 7, "mode": "supervised"}"#,
    )
    .unwrap();

    let s = |p: &str| d.join(p).display().to_string();
    assert_ok(
        &run(&["synth", "--config", &s("world.json"), "--out", &s("world")]),
        "synth",
    );
    assert_ok(
        &run(&[
            "build-bank",
            "--descriptions",
            &s("world/descriptions.pemb"),
            "--refs",
            &s("world/refs.jsonl"),
            "--ref-embeddings",
            &s("world/refs.pemb"),
            "--manifest",
            &s("world/manifest.jsonl"),
            "--out",
            &s("bank"),
        ]),
        "build-bank",
    );
    assert_ok(
        &run(&[
            "train",
            "--bank",
            &s("bank/bank.pbnk"),
            "--train",
            &s("world/train.pemb"),
            "--train-labels",
            &s("world/train_labels.json"),
            "--config",
            &s("train.json"),
            "--out",
            &s("run"),
        ]),
        "train",
    );
    let eval = run(&[
        "eval",
        "--bank",
        &s("bank/bank.pbnk"),
        "--params",
        &s("run"),
        "--batch",
        &s("world/heldout.pemb"),
        "--labels",
        &s("world/heldout_labels.json"),
        "--mode",
        "supervised",
        "--out",
        &s("evalout"),
    ]);
    assert_ok(&eval, "eval");

    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(d.join("evalout/eval_report.json")).unwrap())
            .unwrap();
    let top1 = report["top1"].as_f64().unwrap();
    assert!(top1 > 0.9, "pipeline top-1 too low: {top1}");

    // every stage leaves a run manifest with input digests
    for stage in ["world", "bank", "run", "evalout"] {
        let manifest: serde_json::Value = serde_json::from_str(
            &std::fs::read_to_string(d.join(stage).join("run_manifest.json")).unwrap(),
        )
        .unwrap();
        assert!(manifest["tool_version"].is_string());
        assert!(manifest["input_digests"].is_object());
    }
}

#[test]
fn synth_reruns_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write_world_config(&d.join("world.json"), 13);
    let s = |p: &str| d.join(p).display().to_string();
    assert_ok(
        &run(&["synth", "--config", &s("world.json"), "--out", &s("a")]),
        "synth a",
    );
    assert_ok(
        &run(&["synth", "--config", &s("world.json"), "--out", &s("b")]),
        "synth b",
    );
    for name in [
        "manifest.jsonl",
        "descriptions.pemb",
        "classnames.pemb",
        "refs.jsonl",
        "refs.pemb",
        "train.pemb",
        "train_labels.json",
        "heldout.pemb",
        "heldout_labels.json",
    ] {
        let a = std::fs::read(d.join("a").join(name)).unwrap();
        let b = std::fs::read(d.join("b").join(name)).unwrap();
        assert_eq!(a, b, "{name} differs between reruns");
    }
}

#[test]
fn seed_flag_overrides_config_seed() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write_world_config(&d.join("world.json"), 13);
    let s = |p: &str| d.join(p).display().to_string();
    assert_ok(
        &run(&["synth", "--config", &s("world.json"), "--out", &s("a")]),
        "synth a",
    );
    assert_ok(
        &run(&[
            "synth",
            "--config",
            &s("world.json"),
            "--seed",
            "14",
            "--out",
            &s("b"),
        ]),
        "synth b",
    );
    let a = std::fs::read(d.join("a/train.pemb")).unwrap();
    let b = std::fs::read(d.join("b/train.pemb")).unwrap();
    assert_ne!(a, b, "different seeds must change the generated world");
}

#[test]
fn missing_input_exits_with_data_error() {
    let out = run(&[
        "build-bank",
        "--descriptions",
        "/definitely/not/there.pemb",
        "--refs",
        "/nope",
        "--ref-embeddings",
        "/nope",
        "--manifest",
        "/nope",
        "--out",
        "/tmp/unused",
    ]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(
        err.contains("/definitely/not/there.pemb"),
        "error must name the offending file: {err}"
    );
}

#[test]
fn usage_errors_exit_with_one() {
    let out = run(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(1));
    let out = run(&["synth"]); // missing required flags
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn bench_emits_throughput_json() {
    let out = run(&[
        "bench",
        "--categories",
        "64",
        "--dim",
        "32",
        "--objects",
        "50",
        "--seed",
        "3",
    ]);
    assert_ok(&out, "bench");
    let report: serde_json::Value =
        serde_json::from_str(&String::from_utf8_lossy(&out.stdout)).unwrap();
    assert_eq!(report["n_categories"], 64);
    assert!(report["objects_per_second"].as_f64().unwrap() > 0.0);
    assert!(report["logits_checksum"].is_number());
}
