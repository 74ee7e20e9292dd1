use std::path::Path;
use std::process::{Command, Output};

fn popgrid(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_popgrid"))
        .args(args)
        .env("RUST_LOG", "warn")
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) {
    let out = popgrid(dir, args);
    assert!(
        out.status.success(),
        "popgrid {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
}

/// Small synthetic state directory plus short fine-tuning overrides.
fn dataset() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["synth", "--out", "data", "--rows", "8", "--cols", "8"]);
    dir
}

const FAST: [&str; 6] = [
    "-c",
    "data/popgrid.toml",
    "--set",
    "finetune.max_epochs=1",
    "--set",
    "finetune.head_epochs=1",
];

fn with_fast<'a>(rest: &[&'a str]) -> Vec<&'a str> {
    FAST.iter().copied().chain(rest.iter().copied()).collect()
}

#[test]
fn cv_writes_every_metric_and_a_run_manifest() {
    let dir = dataset();
    ok(dir.path(), &with_fast(&["cv", "--pipeline", "null"]));
    let out = dir.path().join("data/outputs");
    let metrics: serde_json::Value =
        serde_json::from_slice(&std::fs::read(out.join("metrics.json")).unwrap()).unwrap();
    for key in ["r2", "meape", "meae", "iqr_abs_err", "aggpe"] {
        assert!(metrics[key].is_number(), "{key} missing from {metrics}");
    }
    assert_eq!(metrics["n"], 64);
    let run: serde_json::Value =
        serde_json::from_slice(&std::fs::read(out.join("cv.run.json")).unwrap()).unwrap();
    assert_eq!(run["command"], "cv");
    assert!(run["config_sha256"].as_str().unwrap().len() == 64);
    assert!(run["seeds"]["seed"].is_number());
    let inputs = run["inputs"].as_array().unwrap();
    assert!(inputs.iter().any(|i| i["path"].as_str().unwrap().ends_with("tiles.jsonl") && i["sha256"].is_string()));
}

#[test]
fn grid_search_scores_twenty_configurations_then_maps_reproducibly() {
    let dir = dataset();
    ok(dir.path(), &with_fast(&["train", "--grid-search"]));
    let out = dir.path().join("data/outputs");
    let scores = std::fs::read_to_string(out.join("grid_scores.csv")).unwrap();
    assert_eq!(scores.lines().count(), 21, "header plus one row per configuration");
    assert!(out.join("model.json").is_file());

    let map = with_fast(&[
        "--encoder",
        "data/checkpoints/finetuned.json",
        "--model",
        "data/outputs/model.json",
        "predict-map",
    ]);
    ok(dir.path(), &map);
    let first = std::fs::read(out.join("population.tif")).unwrap();
    let first_log = std::fs::read(out.join("prediction_log.csv")).unwrap();
    ok(dir.path(), &map);
    assert_eq!(first, std::fs::read(out.join("population.tif")).unwrap());
    assert_eq!(first_log, std::fs::read(out.join("prediction_log.csv")).unwrap());

    let census: serde_json::Value =
        serde_json::from_slice(&std::fs::read(out.join("census_check.json")).unwrap()).unwrap();
    assert!(census["relative_difference"].is_number());

    ok(
        dir.path(),
        &with_fast(&["compare", "data/outputs/population.tif", "data/reference/SYN.tif"]),
    );
    let cmp: serde_json::Value =
        serde_json::from_slice(&std::fs::read(out.join("comparison.json")).unwrap()).unwrap();
    assert_eq!(cmp["n_cells"], 64);
    assert!(out.join("difference.tif").is_file());
}

#[test]
fn unknown_config_key_is_rejected() {
    let dir = dataset();
    std::fs::write(dir.path().join("bad.toml"), "[finetune]\nmax_epoch = 3\n").unwrap();
    let out = popgrid(dir.path(), &["-c", "bad.toml", "cv", "--pipeline", "null"]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("max_epoch"), "{err}");

    let out = popgrid(dir.path(), &["-c", "data/popgrid.toml", "--set", "forest.trees=5", "cv"]);
    assert!(!out.status.success());
}

#[test]
fn leaking_fold_file_fails_without_leaving_outputs() {
    let dir = dataset();
    let mut entries: Vec<String> = (0..64)
        .map(|i| format!("\"SYN:{}:{}\": {}", i / 8, i % 8, (i % 8) / 2))
        .collect();
    entries.push("\"SYN:0:0\": 3".into());
    std::fs::write(dir.path().join("folds.json"), format!("{{{}}}", entries.join(","))).unwrap();
    let out = popgrid(
        dir.path(),
        &with_fast(&["--set", "paths.folds=\"../folds.json\"", "cv", "--pipeline", "null"]),
    );
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("SYN:0:0"));
    assert!(!dir.path().join("data/outputs/predictions.csv").exists());
    assert!(!dir.path().join("data/outputs/cv.run.json").exists());
}

#[test]
fn explain_and_pretext_write_their_artifacts() {
    let dir = dataset();
    ok(dir.path(), &with_fast(&["finetune"]));
    ok(
        dir.path(),
        &with_fast(&[
            "--encoder",
            "data/checkpoints/finetuned.json",
            "--set",
            "explain.max_tiles=2",
            "--set",
            "explain.tsne.n_iter=300",
            "explain",
        ]),
    );
    let out = dir.path().join("data/outputs");
    assert!(out.join("explain/SYN_0_0.png").is_file());
    assert!(out.join("explain/SYN_0_0.json").is_file());
    let emb = std::fs::read_to_string(out.join("embedding.csv")).unwrap();
    assert_eq!(emb.lines().count(), 65);

    ok(
        dir.path(),
        &with_fast(&["--set", "pretext.epochs=1", "--set", "pretext.method=deepcluster", "pretext"]),
    );
    let manifest: serde_json::Value = serde_json::from_slice(
        &std::fs::read(dir.path().join("data/checkpoints/deepcluster.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(manifest["pretraining"], "deepcluster");
    assert_eq!(std::fs::read_to_string(out.join("pretext_log.csv")).unwrap().lines().count(), 2);
}
