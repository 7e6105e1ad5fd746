//! Training, evaluation, prediction and inspection on top of [`C3vg`].
//!
//! A checkpoint is a safetensors file (`<stem>.safetensors`) with a JSON sidecar
//! (`<stem>.json`) holding the config, vocabulary and progress, plus the optimizer moments
//! (`<stem>.optim.safetensors`) for resuming.

use std::borrow::Cow;
use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use candle_core::{DType, Tensor};
use rand::seq::SliceRandom;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;
use crate::data::{load_split, resize_mask_nearest, GroundingSample, RgbImage};
use crate::error::{Error, Result};
use crate::geometry::{box_to_discrete, BBox, BinaryMask};
use crate::losses::{total_loss, LossReport};
use crate::metrics::{MetricAccumulator, MetricReport};
use crate::model::{Batch, C3vg, PipelineOutput, StagePrediction};
use crate::nn::ParamStore;
use crate::optim::{Adam, Group};
use crate::rle::{self, MaskRle};
use crate::text::{tokenize_text, Vocabulary};

pub const SEED_ENV: &str = "C3VG_SEED";
pub const TRAIN_LOG: &str = "train_log.jsonl";
pub const METRICS_LOG: &str = "metrics.jsonl";
pub const NAN_DUMP: &str = "nan_dump.json";
pub const LAST: &str = "last";
pub const BEST: &str = "best";

/// File names written by [`inspect`], in order.
pub const INSPECT_FILES: [&str; 6] = [
    "coarse_mask.png",
    "fine_mask.png",
    "box_weight.png",
    "mask_weight.png",
    "coarse_box.png",
    "fine_box.png",
];

/// Threshold on sigmoid probabilities used for reported masks.
pub const MASK_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Coarse,
    Fine,
}

impl Stage {
    fn is_fine(self) -> bool {
        self == Stage::Fine
    }
}

impl std::str::FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "coarse" => Ok(Stage::Coarse),
            "fine" => Ok(Stage::Fine),
            other => Err(Error::Config(format!("unknown stage {other:?}"))),
        }
    }
}

/// Replaces `cfg.seed` with `$C3VG_SEED` when set.
pub fn apply_seed_env(cfg: &mut TrainConfig) -> Result<()> {
    if let Ok(v) = std::env::var(SEED_ENV) {
        cfg.seed = v
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("{SEED_ENV}={v:?} is not an unsigned integer")))?;
    }
    Ok(())
}

/// Checkpoint sidecar.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config: TrainConfig,
    pub vocab: Vocabulary,
    /// Zero-based index of the last completed epoch.
    pub epoch: usize,
    pub step: u64,
    /// Validation metrics (fine stage) after `epoch`.
    pub metrics: Option<MetricReport>,
    pub best_miou: Option<f64>,
    pub best_epoch: Option<usize>,
}

pub fn checkpoint_path(dir: &Path, stem: &str) -> PathBuf {
    dir.join(format!("{stem}.safetensors"))
}

fn sidecar_path(weights: &Path) -> PathBuf {
    weights.with_extension("json")
}

fn optim_path(weights: &Path) -> PathBuf {
    weights.with_extension("optim.safetensors")
}

/// A model with its parameters, config and vocabulary.
pub struct LoadedModel {
    pub config: TrainConfig,
    pub vocab: Vocabulary,
    pub store: ParamStore,
    pub model: C3vg,
}

impl LoadedModel {
    /// Freshly initialized from `config.seed`; the vocabulary size is filled in.
    pub fn init(mut config: TrainConfig, vocab: Vocabulary) -> Result<Self> {
        config.model.encoder.vocab_size = vocab.len();
        let mut store = ParamStore::new(DType::F32, config.seed);
        let model = C3vg::new(&mut store, &config)?;
        Ok(Self {
            config,
            vocab,
            store,
            model,
        })
    }

    pub fn from_checkpoint(weights: &Path) -> Result<(Self, CheckpointMeta)> {
        let meta: CheckpointMeta = serde_json::from_str(&fs::read_to_string(sidecar_path(weights))?)?;
        let mut loaded = Self::init(meta.config.clone(), meta.vocab.clone())?;
        loaded.store.load(weights)?;
        Ok((loaded, meta))
    }

    pub fn save(&self, weights: &Path, meta: &CheckpointMeta) -> Result<()> {
        self.store.save(weights)?;
        fs::write(sidecar_path(weights), serde_json::to_string_pretty(meta)?)?;
        Ok(())
    }

    pub fn batch(&self, samples: &[&GroundingSample]) -> Result<Batch> {
        Batch::from_samples(samples, &self.vocab, self.config.model.encoder.max_text_len, DType::F32)
    }

    /// Inference forward (normalization layers use running statistics).
    pub fn infer(&self, samples: &[&GroundingSample]) -> Result<(Batch, PipelineOutput)> {
        let batch = self.batch(samples)?;
        let out = self.model.forward_pipeline(&batch, false)?;
        Ok((batch, out))
    }
}

/// Streams a sample set through the model and accumulates metrics for both stages.
pub fn evaluate_samples(model: &LoadedModel, samples: &[GroundingSample]) -> Result<StageReports> {
    if samples.is_empty() {
        return Err(Error::EmptyEvaluation);
    }
    let mut coarse = MetricAccumulator::default();
    let mut fine = MetricAccumulator::default();
    for chunk in samples.chunks(model.config.batch_size.max(1)) {
        let refs: Vec<&GroundingSample> = chunk.iter().collect();
        let (batch, out) = model.infer(&refs)?;
        for (acc, stage) in [(&mut coarse, &out.coarse), (&mut fine, &out.fine)] {
            let pred = StagePrediction::from_output(stage, MASK_THRESHOLD)?;
            for i in 0..batch.len() {
                acc.push(&pred.boxes[i], &pred.masks[i], &batch.gold_box_list[i], &batch.gold_mask_list[i])?;
            }
        }
    }
    Ok(StageReports {
        coarse: coarse.finish()?,
        fine: fine.finish()?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StageReports {
    pub coarse: MetricReport,
    pub fine: MetricReport,
}

impl StageReports {
    pub fn stage(&self, stage: Stage) -> MetricReport {
        if stage.is_fine() {
            self.fine
        } else {
            self.coarse
        }
    }
}

/// Evaluates a checkpoint on `data_root/<split>`.
pub fn evaluate(weights: &Path, data_root: &Path, split: &str, stage: Stage) -> Result<MetricReport> {
    let (model, _) = LoadedModel::from_checkpoint(weights)?;
    let data = load_split(data_root, split, model.config.image_size)?;
    Ok(evaluate_samples(&model, &data.samples)?.stage(stage))
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Continue from `out_dir/last.safetensors`.
    pub resume: bool,
    /// Stop after this many epochs in this invocation (the schedule is unchanged).
    pub max_epochs: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: u64,
    pub lr_encoder: f64,
    pub lr_heads: f64,
    #[serde(flatten)]
    pub loss: LossReport,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub step: u64,
    pub mean_loss: f64,
    pub seconds: f64,
    pub val: MetricReport,
    pub val_coarse: MetricReport,
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    pub best_miou: Option<f64>,
    pub last_checkpoint: PathBuf,
    pub best_checkpoint: PathBuf,
}

/// Sample order for an epoch: a permutation seeded by `(seed, epoch)` only, so a resumed
/// run sees the same batches as an uninterrupted one.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

/// Random draws for one training sample: a flip coin and two uniforms for the shift.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentDraw {
    pub flip: bool,
    pub u: [f64; 2],
}

/// Per-position augmentation draws for an epoch, seeded like [`epoch_order`] on a separate
/// stream so that resuming replays them.
pub fn epoch_augmentations(n: usize, seed: u64, epoch: usize) -> Vec<AugmentDraw> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(u64::MAX - epoch as u64);
    (0..n)
        .map(|_| AugmentDraw {
            flip: rng.random_bool(0.5),
            u: [rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)],
        })
        .collect()
}

/// Integer in `[max(lo, -k), min(hi, k)]` picked by `u` in `[0, 1)`; both ranges hold 0.
fn pick_shift(u: f64, lo: isize, hi: isize, k: usize) -> isize {
    let k = k as isize;
    let (lo, hi) = (lo.max(-k), hi.min(k));
    (lo + (u * (hi - lo + 1) as f64) as isize).min(hi)
}

/// Applies the configured augmentations, borrowing the sample when none apply.
fn augment<'a>(cfg: &TrainConfig, s: &'a GroundingSample, d: AugmentDraw) -> Cow<'a, GroundingSample> {
    let mut out = Cow::Borrowed(s);
    if cfg.augment_hflip && d.flip {
        out = Cow::Owned(out.hflip());
    }
    if cfg.augment_shift > 0 {
        let (x0, x1, y0, y1) = out.shift_range();
        let dx = pick_shift(d.u[0], x0, x1, cfg.augment_shift);
        let dy = pick_shift(d.u[1], y0, y1, cfg.augment_shift);
        if (dx, dy) != (0, 0) {
            out = Cow::Owned(out.translate(dx, dy));
        }
    }
    out
}

fn open_log(path: &Path, append: bool) -> Result<BufWriter<File>> {
    let f = OpenOptions::new()
        .create(true)
        .write(true)
        .append(append)
        .truncate(!append)
        .open(path)?;
    Ok(BufWriter::new(f))
}

/// Trains on `data_root/train`, validating on `data_root/val` after every epoch.
pub fn train(config: &TrainConfig, data_root: &Path, out_dir: &Path, opts: &TrainOptions) -> Result<TrainSummary> {
    config.validate()?;
    fs::create_dir_all(out_dir)?;
    let train_set = load_split(data_root, "train", config.image_size)?.samples;
    if train_set.is_empty() {
        return Err(Error::EmptyEvaluation);
    }
    let val_set = match load_split(data_root, "val", config.image_size) {
        Ok(d) => d.samples,
        Err(Error::EmptyEvaluation) => Vec::new(),
        Err(e) => return Err(e),
    };
    let last = checkpoint_path(out_dir, LAST);
    let best = checkpoint_path(out_dir, BEST);

    let (model, mut opt, mut step, start_epoch, mut best_miou, mut best_epoch) = if opts.resume {
        let (model, meta) = LoadedModel::from_checkpoint(&last)?;
        let mut opt = Adam::new(&model.store, &model.config.optimizer)?;
        opt.load(&optim_path(&last), meta.step)?;
        (model, opt, meta.step, meta.epoch + 1, meta.best_miou, meta.best_epoch)
    } else {
        let vocab = Vocabulary::build(train_set.iter().map(|s| s.expression.as_str()));
        let model = LoadedModel::init(config.clone(), vocab)?;
        let opt = Adam::new(&model.store, &model.config.optimizer)?;
        (model, opt, 0, 0, None, None)
    };
    let cfg = model.config.clone();
    let mut step_log = open_log(&out_dir.join(TRAIN_LOG), opts.resume)?;
    let mut epoch_log = open_log(&out_dir.join(METRICS_LOG), opts.resume)?;
    let end_epoch = match opts.max_epochs {
        Some(m) => (start_epoch + m).min(cfg.schedule.epochs),
        None => cfg.schedule.epochs,
    };
    let mut epochs = Vec::new();

    for epoch in start_epoch..end_epoch {
        let started = Instant::now();
        opt.set_epoch(&cfg.schedule, epoch);
        let order = epoch_order(train_set.len(), cfg.seed, epoch);
        let draws = epoch_augmentations(train_set.len(), cfg.seed, epoch);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for (batch_idx, chunk) in order.chunks(cfg.batch_size.max(1)).enumerate() {
            let start = batch_idx * cfg.batch_size.max(1);
            let samples: Vec<Cow<GroundingSample>> = chunk
                .iter()
                .zip(&draws[start..])
                .map(|(&i, &d)| augment(&cfg, &train_set[i], d))
                .collect();
            let refs: Vec<&GroundingSample> = samples.iter().map(|s| s.as_ref()).collect();
            let batch = model.batch(&refs)?;
            let out = model.model.forward_pipeline(&batch, true)?;
            let terms = total_loss(&out.coarse, &out.fine, &batch.gold_boxes, &batch.gold_masks, &cfg.weights, &cfg.flags)?;
            if !terms.report.is_finite() {
                let dump = serde_json::json!({
                    "epoch": epoch,
                    "step": step,
                    "batch": batch_idx,
                    "ids": batch.ids,
                    "loss": terms.report,
                });
                fs::write(out_dir.join(NAN_DUMP), serde_json::to_string_pretty(&dump)?)?;
                return Err(Error::NonFiniteLoss {
                    step: step as usize,
                    batch_id: batch_idx,
                    detail: format!("epoch {epoch}, samples {:?}", batch.ids),
                });
            }
            let grads = terms.total.backward()?;
            opt.step(&grads)?;
            step += 1;
            loss_sum += terms.report.total;
            batches += 1;
            let rec = StepRecord {
                epoch,
                step,
                lr_encoder: opt.lr(Group::Encoder),
                lr_heads: opt.lr(Group::Heads),
                loss: terms.report,
            };
            writeln!(step_log, "{}", serde_json::to_string(&rec)?)?;
        }
        step_log.flush()?;

        let reports = if val_set.is_empty() {
            None
        } else {
            Some(evaluate_samples(&model, &val_set)?)
        };
        let fine = reports.map(|r| r.fine);
        if let Some(m) = fine {
            if best_miou.is_none_or(|b| m.miou > b) {
                best_miou = Some(m.miou);
                best_epoch = Some(epoch);
            }
        }
        let meta = CheckpointMeta {
            config: cfg.clone(),
            vocab: model.vocab.clone(),
            epoch,
            step,
            metrics: fine,
            best_miou,
            best_epoch,
        };
        model.save(&last, &meta)?;
        opt.save(&optim_path(&last))?;
        // Without a validation split the latest weights are the best ones.
        if best_epoch == Some(epoch) || val_set.is_empty() {
            model.save(&best, &meta)?;
        }
        let mean_loss = loss_sum / batches.max(1) as f64;
        if let Some(r) = reports {
            let rec = EpochRecord {
                epoch,
                step,
                mean_loss,
                seconds: started.elapsed().as_secs_f64(),
                val: r.fine,
                val_coarse: r.coarse,
            };
            writeln!(epoch_log, "{}", serde_json::to_string(&rec)?)?;
            epoch_log.flush()?;
            log::info!(
                "epoch {epoch}: loss {mean_loss:.4}, val prec@0.5 {:.3}, miou {:.3}, consistency {:.3} ({:.0}s)",
                r.fine.prec_at_05,
                r.fine.miou,
                r.fine.consistency_rate,
                rec.seconds
            );
            epochs.push(rec);
        } else {
            log::info!("epoch {epoch}: loss {mean_loss:.4}");
        }
    }
    Ok(TrainSummary {
        epochs,
        best_epoch,
        best_miou,
        last_checkpoint: last,
        best_checkpoint: best,
    })
}

/// Output of [`predict`]: the fine-stage box and mask at the input image's resolution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub box_cxcywh: [f64; 4],
    pub mask_rle: MaskRle,
}

pub fn load_image(path: &Path) -> Result<RgbImage> {
    Ok(RgbImage::from_rgb8(&image::open(path)?.to_rgb8()))
}

/// Wraps an arbitrary image and expression as a single-sample batch at model resolution.
fn query_sample(model: &LoadedModel, image: &RgbImage, expression: &str) -> Result<GroundingSample> {
    if image.height() == 0 || image.width() == 0 {
        return Err(Error::BadImageShape {
            height: image.height(),
            width: image.width(),
            reason: "image is empty".into(),
        });
    }
    // Fails early on an expression with no words.
    tokenize_text(expression, &model.vocab, model.config.model.encoder.max_text_len)?;
    let s = model.config.image_size;
    let mut gold_mask = BinaryMask::zeros(s, s);
    gold_mask.set(0, 0, true);
    Ok(GroundingSample {
        id: "query".into(),
        image: image.resize(s, s),
        expression: expression.to_string(),
        gold_box: BBox::new(0.5, 0.5, 1.0, 1.0),
        gold_mask,
    })
}

pub fn predict(model: &LoadedModel, image: &RgbImage, expression: &str) -> Result<PredictionRecord> {
    let sample = query_sample(model, image, expression)?;
    let (_, out) = model.infer(&[&sample])?;
    let pred = StagePrediction::from_output(&out.fine, MASK_THRESHOLD)?;
    let mask = resize_mask_nearest(&pred.masks[0], image.height(), image.width());
    Ok(PredictionRecord {
        box_cxcywh: pred.boxes[0].to_array(),
        mask_rle: rle::encode(&mask),
    })
}

fn gray_png(path: &Path, values: &Tensor) -> Result<()> {
    let (h, w) = values.dims2()?;
    let v: Vec<f64> = values.to_dtype(DType::F64)?.flatten_all()?.to_vec1()?;
    let img = image::GrayImage::from_fn(w as u32, h as u32, |x, y| {
        let p = v[y as usize * w + x as usize].clamp(0.0, 1.0);
        image::Luma([(255.0 * p).round() as u8])
    });
    img.save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}

fn box_overlay_png(path: &Path, image: &RgbImage, b: &BBox, color: [u8; 3]) -> Result<()> {
    let mut img = image.to_rgb8();
    let (h, w) = (image.height(), image.width());
    let d = box_to_discrete(b, w, h);
    if d.x2 > d.x1 && d.y2 > d.y1 {
        for x in d.x1..d.x2 {
            img.put_pixel(x as u32, d.y1 as u32, image::Rgb(color));
            img.put_pixel(x as u32, (d.y2 - 1) as u32, image::Rgb(color));
        }
        for y in d.y1..d.y2 {
            img.put_pixel(d.x1 as u32, y as u32, image::Rgb(color));
            img.put_pixel((d.x2 - 1) as u32, y as u32, image::Rgb(color));
        }
    }
    img.save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}

/// Writes the [`INSPECT_FILES`]: mask probabilities of both stages (`255 * sigmoid`,
/// rounded, at model resolution), the box and mask weight maps on the patch grid, and the
/// input at model resolution with the coarse and fine boxes drawn.
pub fn inspect(model: &LoadedModel, image: &RgbImage, expression: &str, out_dir: &Path) -> Result<Vec<PathBuf>> {
    let sample = query_sample(model, image, expression)?;
    let (_, out) = model.infer(&[&sample])?;
    fs::create_dir_all(out_dir)?;
    let paths: Vec<PathBuf> = INSPECT_FILES.iter().map(|f| out_dir.join(f)).collect();
    let sig = |t: &Tensor| -> Result<Tensor> { Ok(candle_nn::ops::sigmoid(&t.get(0)?)?) };
    gray_png(&paths[0], &sig(&out.coarse.mask_logits)?)?;
    gray_png(&paths[1], &sig(&out.fine.mask_logits)?)?;
    gray_png(&paths[2], &out.intermediates.box_weight.get(0)?)?;
    gray_png(&paths[3], &out.intermediates.mask_weight.get(0)?)?;
    let coarse = StagePrediction::from_output(&out.coarse, MASK_THRESHOLD)?;
    let fine = StagePrediction::from_output(&out.fine, MASK_THRESHOLD)?;
    box_overlay_png(&paths[4], &sample.image, &coarse.boxes[0], [255, 64, 64])?;
    box_overlay_png(&paths[5], &sample.image, &fine.boxes[0], [64, 255, 64])?;
    Ok(paths)
}
