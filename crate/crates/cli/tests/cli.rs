use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use c3vg::config::TrainConfig;
use tempfile::TempDir;

fn c3vg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_c3vg"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("run c3vg")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn presets_print_valid_configs() {
    for preset in ["default", "ablation", "toy"] {
        let out = c3vg(&["config", "--preset", preset]);
        assert!(out.status.success());
        TrainConfig::from_json_str(std::str::from_utf8(&out.stdout).unwrap()).unwrap();
    }
}

#[test]
fn bad_input_exits_with_code_2() {
    let tmp = TempDir::new().unwrap();
    let missing = tmp.path().join("missing.json");
    let out = c3vg(&["train", "--config", s(&missing), "--data", "d", "--out", "o"]);
    assert_eq!(out.status.code(), Some(2));

    let bad = tmp.path().join("bad.json");
    let mut cfg = serde_json::to_value(TrainConfig::toy()).unwrap();
    cfg["weights"]["lambda_typo"] = 1.0.into();
    fs::write(&bad, cfg.to_string()).unwrap();
    let out = c3vg(&["train", "--config", s(&bad), "--data", "d", "--out", "o"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("lambda_typo"));

    fs::write(tmp.path().join("occupied"), "x").unwrap();
    let out = c3vg(&["generate-data", "--out", s(tmp.path()), "--n-train", "2", "--n-val", "1"]);
    assert_eq!(out.status.code(), Some(2));

    assert_eq!(c3vg(&["evaluate", "--split", "test"]).status.code(), Some(2));
}

#[test]
fn end_to_end_workflow() {
    let tmp = TempDir::new().unwrap();
    let (data, run) = (tmp.path().join("data"), tmp.path().join("run"));
    let out = c3vg(&["generate-data", "--out", s(&data), "--n-train", "16", "--n-val", "4", "--image-size", "64", "--seed", "5"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    let mut cfg = TrainConfig::toy();
    cfg.batch_size = 8;
    cfg.schedule.epochs = 1;
    cfg.schedule.decay_epoch = 1;
    let cfg_path = tmp.path().join("cfg.json");
    fs::write(&cfg_path, serde_json::to_string(&cfg).unwrap()).unwrap();
    let out = c3vg(&["train", "--config", s(&cfg_path), "--data", s(&data), "--out", s(&run)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let ckpt = run.join("last.safetensors");

    let report = tmp.path().join("report.json");
    let out = c3vg(&["evaluate", "--checkpoint", s(&ckpt), "--data", s(&data), "--split", "val", "--report", s(&report)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let metrics: serde_json::Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    for key in ["prec_at_0.5", "acc_ris", "miou", "oiou", "consistency_rate", "n"] {
        assert!(metrics.get(key).is_some(), "missing {key}");
    }

    let image = fs::read_dir(data.join("val/images")).unwrap().next().unwrap().unwrap().path();
    let pred = tmp.path().join("pred.json");
    let out = c3vg(&["predict", "--checkpoint", s(&ckpt), "--image", s(&image), "--expression", "the blue square", "--out", s(&pred)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let rec: serde_json::Value = serde_json::from_str(&fs::read_to_string(&pred).unwrap()).unwrap();
    assert_eq!(rec["mask_rle"]["size"], serde_json::json!([64, 64]));

    let dir = tmp.path().join("inspect");
    let out = c3vg(&["inspect", "--checkpoint", s(&ckpt), "--image", s(&image), "--expression", "the blue square", "--out", s(&dir)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(fs::read_dir(&dir).unwrap().count(), 6);

    let missing = tmp.path().join("nope.safetensors");
    let out = c3vg(&["predict", "--checkpoint", s(&missing), "--image", s(&image), "--expression", "x", "--out", s(&pred)]);
    assert_eq!(out.status.code(), Some(2));
}
