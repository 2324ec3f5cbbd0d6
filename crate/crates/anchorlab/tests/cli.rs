use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use anchorlab::formats;

fn anchorlab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_anchorlab"))
        .args(args)
        .env_remove("ANCHORLAB_THREADS")
        .output()
        .expect("binary runs")
}

fn stderr_json(o: &Output) -> serde_json::Value {
    serde_json::from_slice(&o.stderr).expect("stderr is one JSON object")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn write_run(dir: &Path, epochs: u64, classifier: &str) -> std::path::PathBuf {
    let run = serde_json::json!({
        "name": "cli",
        "seed": 3,
        "dataset": {
            "source": "synthetic",
            "blobs": { "k": 3, "m": 5, "per_class": 30, "center_scale": 4.0, "noise_sigma": 1.0 }
        },
        "model": { "hidden_dims": [8], "classifier": classifier },
        "optim": { "learning_rate": 0.05, "epochs": epochs, "batch_size": 16 },
        "loss": { "variant": "Softmax", "scale": 4.0, "feature_normalize": true }
    });
    let path = dir.join("run.json");
    formats::write_json(&path, &run).unwrap();
    path
}

/// Only the cheap groups, so a supplied prototype file decides the outcome.
fn quick_verify_config(dir: &Path) -> std::path::PathBuf {
    let cfg = serde_json::json!({
        "closed_form_grid": [[3, 2]],
        "optimized_grid": [],
        "grad_instances": 1,
        "symmetry_points": 10,
        "lipschitz_k": [3],
        "lipschitz_b": [1.0],
        "empirical_b": [1.0],
        "empirical_samples": 2000,
        "etas": [0.2]
    });
    let path = dir.join("verify.json");
    formats::write_json(&path, &cfg).unwrap();
    path
}

#[test]
fn protogen_reruns_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    for sub in ["a", "b"] {
        let out = dir.path().join(sub);
        let o = anchorlab(&["protogen", "--k", "4", "--d", "6", "--mode", "optimized", "--seed", "7", "--out", s(&out)]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    for f in ["prototypes.proto.json", "prototypes.proto.bin"] {
        assert_eq!(fs::read(dir.path().join("a").join(f)).unwrap(), fs::read(dir.path().join("b").join(f)).unwrap());
    }
}

#[test]
fn protogen_rejects_impossible_dimension() {
    let dir = tempfile::tempdir().unwrap();
    let o = anchorlab(&["protogen", "--k", "10", "--d", "3", "--out", s(dir.path())]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(stderr_json(&o)["error"], "DimensionError");
}

#[test]
fn synth_reruns_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    for sub in ["a", "b"] {
        let out = dir.path().join(sub);
        let o = anchorlab(&[
            "synth", "--k", "4", "--m", "3", "--per-class", "40", "--imbalance", "longtail", "--rho", "4", "--noise",
            "symmetric", "--eta", "0.25", "--seed", "11", "--out", s(&out),
        ]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    for f in ["recipe.json", "train/data.bin", "train/labels.bin", "train/clean_labels.bin", "eval/data.bin", "train/counts.csv"] {
        assert_eq!(fs::read(dir.path().join("a").join(f)).unwrap(), fs::read(dir.path().join("b").join(f)).unwrap(), "{f}");
    }
    let train = formats::read_bundle(&dir.path().join("a/train")).unwrap();
    assert_eq!(train.class_counts().iter().sum::<usize>(), train.len());
    assert!(train.clean_labels().is_some());
}

#[test]
fn zero_epoch_run_writes_header_only_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let run = write_run(dir.path(), 0, "anchored");
    let out = dir.path().join("out");
    let o = anchorlab(&["train", "--config", s(&run), "--out", s(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1);
    assert!(csv.starts_with("epoch,"));
}

#[test]
fn anchored_checkpoint_holds_prototype_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let run = write_run(dir.path(), 4, "anchored");
    let out = dir.path().join("out");
    let o = anchorlab(&["train", "--config", s(&run), "--out", s(&out), "--json"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let summary: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(summary["epochs"], 4);

    let header: formats::CheckpointHeader = formats::read_json(&out.join(formats::CHECKPOINT_JSON)).unwrap();
    let blob = fs::read(out.join(formats::CHECKPOINT_BIN)).unwrap();
    let range = formats::tensor_range(&header, "classifier").unwrap();
    let protos = fs::read(out.join("prototypes.proto.bin")).unwrap();
    assert_eq!(&blob[range], protos.as_slice());
    for f in ["resolved_config.json", "summary.json", "analysis.json", "calibration_bins.csv", "margins.csv"] {
        assert!(out.join(f).exists(), "{f}");
    }
}

#[test]
fn analyze_reads_a_checkpoint_and_bundle() {
    let dir = tempfile::tempdir().unwrap();
    let run = write_run(dir.path(), 3, "learnable");
    let out = dir.path().join("out");
    assert!(anchorlab(&["train", "--config", s(&run), "--out", s(&out)]).status.success());
    let data = dir.path().join("data");
    assert!(anchorlab(&["synth", "--k", "3", "--m", "5", "--per-class", "10", "--out", s(&data)]).status.success());
    let report = dir.path().join("report");
    let o = anchorlab(&[
        "analyze", "--checkpoint", s(&out), "--data", s(&data.join("eval")), "--ece-bins", "5", "--out", s(&report), "--json",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["kind"], "analysis_report");
    assert_eq!(v["calibration"]["bin_count"], 5);
    assert!(report.join("analysis.json").exists());
}

#[test]
fn verify_fails_on_a_perturbed_prototype_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = quick_verify_config(dir.path());
    let protos = dir.path().join("p");
    assert!(anchorlab(&["protogen", "--k", "5", "--d", "4", "--out", s(&protos)]).status.success());
    let json = protos.join("prototypes.proto.json");

    let good = anchorlab(&["verify", "--config", s(&cfg), "--prototypes", s(&json)]);
    assert_eq!(good.status.code(), Some(0), "{}", String::from_utf8_lossy(&good.stdout));

    let bin = protos.join("prototypes.proto.bin");
    let mut bytes = fs::read(&bin).unwrap();
    let v = f64::from_le_bytes(bytes[..8].try_into().unwrap()) + 1e-4;
    bytes[..8].copy_from_slice(&v.to_le_bytes());
    fs::write(&bin, bytes).unwrap();
    let bad = anchorlab(&["verify", "--config", s(&cfg), "--prototypes", s(&json), "--json"]);
    assert_eq!(bad.status.code(), Some(1));
    let report: serde_json::Value = serde_json::from_slice(&bad.stdout).unwrap();
    assert_eq!(report["pass"], false);
}

#[test]
fn usage_errors_exit_two_with_json() {
    let o = anchorlab(&["protogen", "--k", "three", "--d", "2"]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(stderr_json(&o)["error"], "UsageError");
    let o = anchorlab(&["train"]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(stderr_json(&o)["exit_code"], 2);
}

#[test]
fn missing_inputs_exit_three() {
    let dir = tempfile::tempdir().unwrap();
    let o = anchorlab(&["train", "--config", s(&dir.path().join("absent.json"))]);
    assert_eq!(o.status.code(), Some(3));
    assert_eq!(stderr_json(&o)["error"], "IoError");
}

#[test]
fn malformed_idx_reports_the_byte_offset() {
    let dir = tempfile::tempdir().unwrap();
    let images = dir.path().join("img.idx");
    let labels = dir.path().join("lab.idx");
    fs::write(&images, [0u8, 0, 8, 3, 0, 0, 0, 2, 0, 0, 0, 2, 0, 0, 0, 2, 1, 2, 3]).unwrap();
    fs::write(&labels, [0u8, 0, 8, 1, 0, 0, 0, 2, 0, 1]).unwrap();
    let run = serde_json::json!({
        "name": "idx",
        "dataset": {
            "source": "idx",
            "train_images": "img.idx", "train_labels": "lab.idx",
            "eval_images": "img.idx", "eval_labels": "lab.idx"
        },
        "optim": { "learning_rate": 0.05, "epochs": 1, "batch_size": 2 },
        "loss": { "variant": "Softmax" }
    });
    let path = dir.path().join("run.json");
    formats::write_json(&path, &run).unwrap();
    let o = anchorlab(&["train", "--config", s(&path), "--out", s(&dir.path().join("out"))]);
    assert_eq!(o.status.code(), Some(3));
    let err = stderr_json(&o);
    assert_eq!(err["error"], "FormatError");
    assert_eq!(err["byte_offset"], 19);
}

#[test]
fn nsl_runs_default_to_normalized_noise_aware_scale() {
    let dir = tempfile::tempdir().unwrap();
    let run = serde_json::json!({
        "name": "nsl",
        "dataset": {
            "source": "synthetic",
            "blobs": { "k": 3, "m": 4, "per_class": 20, "center_scale": 4.0, "noise_sigma": 1.0 },
            "noise": { "kind": "symmetric", "eta": 0.2 }
        },
        "model": { "hidden_dims": [6] },
        "optim": { "learning_rate": 0.05, "epochs": 1, "batch_size": 8 },
        "loss": { "variant": "NSL" }
    });
    let path = dir.path().join("run.json");
    formats::write_json(&path, &run).unwrap();
    let out = dir.path().join("out");
    let o = anchorlab(&["train", "--config", s(&path), "--out", s(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let resolved: serde_json::Value = formats::read_json(&out.join("resolved_config.json")).unwrap();
    assert_eq!(resolved["loss"]["feature_normalize"], true);
    assert_eq!(resolved["loss"]["scale"], 1.0);
    assert_eq!(resolved["loss"]["anchored"], true);
}
