use std::fs;
use std::path::Path;

use c3vg::config::TrainConfig;
use c3vg::data::{generate_data, load_split};
use c3vg::harness::{
    self, apply_seed_env, checkpoint_path, CheckpointMeta, LoadedModel, StepRecord, TrainOptions, INSPECT_FILES,
};
use c3vg::rle;
use tempfile::TempDir;

fn tiny_config() -> TrainConfig {
    let mut cfg = TrainConfig::toy();
    cfg.batch_size = 8;
    cfg.schedule.epochs = 3;
    cfg.schedule.decay_epoch = 2;
    cfg
}

fn tiny_data(dir: &Path) {
    generate_data(dir, 32, 8, 64, 3, true).unwrap();
}

fn steps(out: &Path) -> Vec<StepRecord> {
    fs::read_to_string(out.join("train_log.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

#[test]
fn training_writes_checkpoints_logs_and_reduces_loss() {
    let tmp = TempDir::new().unwrap();
    let (data, out) = (tmp.path().join("data"), tmp.path().join("run"));
    tiny_data(&data);
    let summary = harness::train(&tiny_config(), &data, &out, &TrainOptions::default()).unwrap();
    assert_eq!(summary.epochs.len(), 3);
    for stem in ["last", "best"] {
        assert!(checkpoint_path(&out, stem).is_file());
        assert!(out.join(format!("{stem}.json")).is_file());
    }
    assert!(out.join("last.optim.safetensors").is_file());
    let log = steps(&out);
    assert_eq!(log.len(), 12);
    assert!(log.iter().all(|s| s.loss.total.is_finite()));
    assert!(summary.epochs[2].mean_loss < summary.epochs[0].mean_loss, "{:?}", summary.epochs);
    let metrics = fs::read_to_string(out.join("metrics.jsonl")).unwrap();
    assert_eq!(metrics.lines().count(), 3);
}

#[test]
fn resume_reproduces_uninterrupted_run() {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("data");
    tiny_data(&data);
    let mut cfg = tiny_config();
    cfg.schedule.epochs = 2;
    cfg.augment_hflip = true;
    cfg.augment_shift = 6;
    let full = tmp.path().join("full");
    harness::train(&cfg, &data, &full, &TrainOptions::default()).unwrap();

    let split = tmp.path().join("split");
    let first = TrainOptions { max_epochs: Some(1), ..Default::default() };
    harness::train(&cfg, &data, &split, &first).unwrap();
    let meta: CheckpointMeta = serde_json::from_str(&fs::read_to_string(split.join("last.json")).unwrap()).unwrap();
    assert_eq!((meta.epoch, meta.step), (0, 4));
    harness::train(&cfg, &data, &split, &TrainOptions { resume: true, ..Default::default() }).unwrap();

    let (a, b) = (steps(&full), steps(&split));
    assert_eq!(a.len(), b.len());
    for (x, y) in a.iter().zip(&b) {
        assert_eq!((x.epoch, x.step), (y.epoch, y.step));
        assert_eq!(x.loss.total, y.loss.total, "step {}", x.step);
    }
}

#[test]
fn evaluate_predict_and_inspect_untrained_model() {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("data");
    tiny_data(&data);
    let mut cfg = tiny_config();
    cfg.schedule.epochs = 1;
    let out = tmp.path().join("run");
    let summary = harness::train(&cfg, &data, &out, &TrainOptions::default()).unwrap();

    for stage in [harness::Stage::Coarse, harness::Stage::Fine] {
        let r = harness::evaluate(&summary.last_checkpoint, &data, "val", stage).unwrap();
        assert_eq!(r.n_samples, 8);
        for v in [r.prec_at_05, r.acc_ris, r.miou, r.oiou, r.consistency_rate] {
            assert!((0.0..=1.0).contains(&v), "{r:?}");
        }
    }

    let (model, _) = LoadedModel::from_checkpoint(&summary.last_checkpoint).unwrap();
    let first = fs::read_to_string(data.join("val/annotations.jsonl")).unwrap();
    let rec = c3vg::data::parse_annotation_line(first.lines().next().unwrap(), 1).unwrap();
    let image = harness::load_image(&data.join("val").join(&rec.image)).unwrap();
    let image = image.resize(50, 70);
    let pred = harness::predict(&model, &image, "the red circle").unwrap();
    assert_eq!(pred.mask_rle.size, [50, 70]);
    assert_eq!(rle::decode(&pred.mask_rle).unwrap().dims(), (50, 70));
    assert!(pred.box_cxcywh.iter().all(|v| (0.0..=1.0).contains(v)));
    assert!(harness::predict(&model, &image, "   ").is_err());

    let dir = tmp.path().join("inspect");
    let files = harness::inspect(&model, &image, "the red circle", &dir).unwrap();
    assert_eq!(files.len(), INSPECT_FILES.len());
    assert!(files.iter().all(|f| f.is_file()));
    let weight = image::open(dir.join("box_weight.png")).unwrap().to_luma8();
    let mut levels: Vec<u8> = weight.pixels().map(|p| p.0[0]).collect();
    levels.sort_unstable();
    levels.dedup();
    assert!(levels.iter().all(|&v| v == 26 || v == 255), "{levels:?}");
    let val = load_split(&data, "val", 64).unwrap();
    assert_eq!(val.samples.len(), 8);
}

#[test]
fn augmentation_draws_are_replayable() {
    let a = harness::epoch_augmentations(50, 9, 3);
    assert_eq!(a, harness::epoch_augmentations(50, 9, 3));
    assert_ne!(a, harness::epoch_augmentations(50, 9, 4));
    let flips = a.iter().filter(|d| d.flip).count();
    assert!((10..=40).contains(&flips));
}

#[test]
fn seed_env_overrides_config() {
    let mut cfg = TrainConfig::toy();
    std::env::set_var(harness::SEED_ENV, "77");
    apply_seed_env(&mut cfg).unwrap();
    assert_eq!(cfg.seed, 77);
    std::env::set_var(harness::SEED_ENV, "abc");
    assert!(apply_seed_env(&mut cfg).is_err());
    std::env::remove_var(harness::SEED_ENV);
}
