use std::path::Path;
use std::process::{Command, Output};

fn roadsense(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_roadsense"))
        .arg("--workdir")
        .arg(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = roadsense(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed:\n{}\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

const MODEL: [&str; 5] = ["--compact", "--input-size", "64x64", "--eval-size", "64x64"];

fn gen(dir: &Path) {
    ok(
        dir,
        &["gen-synth", "--root", "data", "--width", "64", "--height", "64", "--train", "4", "--val", "2", "--min-objects", "1", "--max-objects", "2"],
    );
}

fn train(dir: &Path, run: &str) {
    let mut args = vec!["train", "--data", "data", "--run", run];
    args.extend(MODEL);
    args.extend(["--epochs", "2", "--warmup-epochs", "1", "--batch-size", "2"]);
    ok(dir, &args);
}

#[test]
fn full_workflow() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    gen(dir);
    for f in ["images/train/train_00000.png", "labels/train/train_00000.json", "labels/val/val_00001_drivable.png"] {
        assert!(dir.join("data").join(f).is_file(), "{f}");
    }

    train(dir, "runs/a");
    let run = dir.join("runs/a");
    for f in ["last.ckpt", "best.ckpt", "train_log.csv", "config.toml", "eval_epoch2.json"] {
        assert!(run.join(f).is_file(), "{f}");
    }
    let log = std::fs::read_to_string(run.join("train_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 1 + 2 * 2);

    let out = ok(dir, &["eval", "--weights", "runs/a/last.ckpt", "--data", "data", "--out", "runs/a/eval.json"]);
    assert!(out.contains("mAP50"));
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(run.join("eval.json")).unwrap()).unwrap();
    assert_eq!(report["num_images"], 2);
    assert!(report["lane_iou"].is_number());

    ok(dir, &["infer", "--weights", "runs/a/last.ckpt", "--image", "data/images/val/val_00000.png", "--out", "pred"]);
    for f in ["val_00000.json", "val_00000_overlay.png", "val_00000_drivable.png", "val_00000_lane.png"] {
        assert!(dir.join("pred").join(f).is_file(), "{f}");
    }
    let result: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.join("pred/val_00000.json")).unwrap()).unwrap();
    assert_eq!((result["width"].as_u64(), result["height"].as_u64()), (Some(64), Some(64)));

    let out = ok(dir, &["bench", "--weights", "runs/a/last.ckpt", "--iterations", "2", "--warmup", "1", "--compare-warmup", "--out", "bench.txt"]);
    assert!(out.contains("fps") && out.contains("without warmup"));
    assert!(dir.join("bench.txt").is_file());

    let out = ok(dir, &["prep-lanes", "--root", "data", "--split", "val", "--width", "3"]);
    assert!(out.contains('2'));
    assert!(dir.join("data/labels/val/val_00000_lane_w3.png").is_file());

    // resuming a finished run is a no-op that still succeeds
    let mut args = vec!["train", "--data", "data", "--run", "runs/a", "--resume"];
    args.extend(MODEL);
    args.extend(["--epochs", "2", "--warmup-epochs", "1", "--batch-size", "2"]);
    ok(dir, &args);
}

#[test]
fn identical_flags_give_identical_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    gen(dir);
    train(dir, "runs/a");
    train(dir, "runs/b");
    for f in ["last.ckpt", "train_log.csv", "config.toml", "eval_epoch2.json"] {
        let a = std::fs::read(dir.join("runs/a").join(f)).unwrap();
        let b = std::fs::read(dir.join("runs/b").join(f)).unwrap();
        assert!(a == b, "{f} differs");
    }
}

#[test]
fn bench_without_weights_uses_model_flags() {
    let tmp = tempfile::tempdir().unwrap();
    let mut args = vec!["bench", "--iterations", "2", "--warmup", "0"];
    args.extend(MODEL);
    let out = ok(tmp.path(), &args);
    assert!(out.contains("input: 64x64") && out.contains("params:"));
}

#[test]
fn ablate_prints_a_complete_table() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    gen(dir);
    let mut args = vec!["ablate", "--data", "data", "--run", "abl", "--epochs", "2", "--batch-size", "2"];
    args.extend(MODEL);
    let out = ok(dir, &args);
    for row in ["Baseline", "+ Mosaic & Mixup", "+ Transposed conv", "+ Focal & Dice"] {
        assert!(out.contains(row), "{row}");
    }
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.join("abl/ablation.json")).unwrap()).unwrap();
    assert_eq!(report["rows"].as_array().unwrap().len(), 4);
}

#[test]
fn usage_errors_exit_with_two() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(roadsense(tmp.path(), &["eval", "--data", "data"]).status.code(), Some(2));
    assert_eq!(roadsense(tmp.path(), &["frobnicate"]).status.code(), Some(2));
    assert_eq!(roadsense(tmp.path(), &["train", "--data", "d", "--run", "r", "--input-size", "64"]).status.code(), Some(2));
}

#[test]
fn runtime_errors_exit_with_one() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let out = roadsense(dir, &["eval", "--weights", "missing.ckpt", "--data", "data"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(!out.stderr.is_empty());

    std::fs::write(dir.join("bad.toml"), "no_such_key = 3\n").unwrap();
    let out = roadsense(dir, &["--config", "bad.toml", "bench", "--iterations", "1"]);
    assert_eq!(out.status.code(), Some(1));

    std::fs::write(dir.join("small.toml"), "input_width = 64\ninput_height = 64\neval_width = 64\neval_height = 64\nstage_channels = [16, 32, 64, 128]\nblocks_per_stage = 1\n").unwrap();
    let out = ok(dir, &["--config", "small.toml", "bench", "--iterations", "1", "--warmup", "0"]);
    assert!(out.contains("input: 64x64"));
}
