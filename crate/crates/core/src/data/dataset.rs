//! On-disk dataset layout:
//!
//! ```text
//! root/images/*.png
//! root/masks/*.png          (only for records using PNG masks)
//! root/annotations.jsonl    one AnnotationRecord per line
//! root/meta.json            generated datasets only
//! ```
//!
//! `generate_data` writes one such directory per split under `out/train` and `out/val`.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::synth::{derive_seed, generate_scene, render_sample, GRAMMAR_VERSION};
use super::{raster::rasterize_polygon, resize_mask_nearest, GroundingSample, RgbImage};
use crate::error::{Error, Result};
use crate::geometry::{BBox, BinaryMask};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaskField {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub polygon: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub png: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotationRecord {
    pub id: String,
    pub image: String,
    pub expression: String,
    pub bbox_xywh_px: [f64; 4],
    pub mask: MaskField,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetMeta {
    pub seed: u64,
    pub count: usize,
    pub image_size: usize,
    pub grammar_version: u32,
}

/// Parses and validates one JSON line. `line` is the 1-based line number used in errors.
pub fn parse_annotation_line(text: &str, line: usize) -> Result<AnnotationRecord> {
    let bad = |reason: String| Error::BadAnnotation { line, reason };
    let rec: AnnotationRecord = serde_json::from_str(text).map_err(|e| bad(e.to_string()))?;
    if rec.id.is_empty() || rec.image.is_empty() {
        return Err(bad("empty id or image path".into()));
    }
    if rec.expression.trim().is_empty() {
        return Err(bad("empty expression".into()));
    }
    let [x, y, w, h] = rec.bbox_xywh_px;
    if rec.bbox_xywh_px.iter().any(|v| !v.is_finite()) || x < 0.0 || y < 0.0 || w <= 0.0 || h <= 0.0 {
        return Err(bad(format!("invalid bbox {:?}", rec.bbox_xywh_px)));
    }
    match (&rec.mask.polygon, &rec.mask.png) {
        (Some(polys), None) => {
            if polys.is_empty() {
                return Err(bad("empty polygon list".into()));
            }
            for p in polys {
                if p.len() < 6 || p.len() % 2 != 0 || p.iter().any(|v| !v.is_finite()) {
                    return Err(bad("polygon must hold at least 3 finite (x, y) pairs".into()));
                }
            }
        }
        (None, Some(path)) if !path.is_empty() => {}
        _ => return Err(bad("mask needs exactly one of \"polygon\" or \"png\"".into())),
    }
    Ok(rec)
}

/// Samples read from one split plus the number of records skipped for missing images.
#[derive(Debug, Clone, Default)]
pub struct LoadedDataset {
    pub samples: Vec<GroundingSample>,
    pub skipped_missing: usize,
}

/// Union of flat `[x0, y0, x1, y1, ...]` polygons in pixel coordinates.
pub fn union_polygons(polys: &[Vec<f64>], h: usize, w: usize, line: usize) -> Result<BinaryMask> {
    let mut out = BinaryMask::zeros(h, w);
    for p in polys {
        let verts: Vec<(f64, f64)> = p.chunks_exact(2).map(|c| (c[0], c[1])).collect();
        let m = rasterize_polygon(&verts, h, w).map_err(|e| match e {
            Error::BadAnnotation { reason, .. } => Error::BadAnnotation { line, reason },
            other => other,
        })?;
        for y in 0..h {
            for x in 0..w {
                if m.get(y, x) {
                    out.set(y, x, true);
                }
            }
        }
    }
    Ok(out)
}

/// Decodes an encoded mask image; gray levels of 128 and above are foreground.
pub fn decode_png_mask(bytes: &[u8]) -> Result<BinaryMask> {
    let img = image::load_from_memory(bytes)?.to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    BinaryMask::from_vec(h, w, img.pixels().map(|p| p.0[0] >= 128).collect())
}

fn read_png_mask(path: &Path) -> Result<BinaryMask> {
    decode_png_mask(&fs::read(path)?)
}

fn write_png_mask(path: &Path, mask: &BinaryMask) -> Result<()> {
    let (h, w) = mask.dims();
    let img = image::GrayImage::from_fn(w as u32, h as u32, |x, y| {
        image::Luma([if mask.get(y as usize, x as usize) { 255 } else { 0 }])
    });
    img.save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}

/// Loads a split directory, resizing every image (bilinear) and mask (nearest) to
/// `image_size x image_size`. Boxes are normalized by the original image size.
pub fn load_refcoco_format(root: &Path, image_size: usize) -> Result<LoadedDataset> {
    let ann = root.join("annotations.jsonl");
    let file = fs::File::open(&ann)?;
    let mut out = LoadedDataset::default();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line_no = i + 1;
        let text = line?;
        if text.trim().is_empty() {
            continue;
        }
        let rec = parse_annotation_line(&text, line_no)?;
        let img_path = root.join(&rec.image);
        if !img_path.is_file() {
            log::warn!("line {line_no}: image {} not found, skipping", img_path.display());
            out.skipped_missing += 1;
            continue;
        }
        let rgb = RgbImage::from_rgb8(&image::open(&img_path)?.to_rgb8());
        let (h0, w0) = (rgb.height(), rgb.width());
        let mask = match (&rec.mask.polygon, &rec.mask.png) {
            (Some(polys), _) => union_polygons(polys, h0, w0, line_no)?,
            (_, Some(p)) => read_png_mask(&root.join(p))?,
            _ => unreachable!("validated by parse_annotation_line"),
        };
        if mask.dims() != (h0, w0) {
            return Err(Error::BadAnnotation {
                line: line_no,
                reason: format!("mask is {:?} but image is {:?}", mask.dims(), (h0, w0)),
            });
        }
        let [x, y, w, h] = rec.bbox_xywh_px;
        let gold_box = BBox::from_corners(
            x / w0 as f64,
            y / h0 as f64,
            (x + w) / w0 as f64,
            (y + h) / h0 as f64,
        );
        let gold_mask = resize_mask_nearest(&mask, image_size, image_size);
        if gold_mask.is_empty() {
            return Err(Error::BadAnnotation {
                line: line_no,
                reason: "mask is empty".into(),
            });
        }
        out.samples.push(GroundingSample {
            id: rec.id,
            image: rgb.resize(image_size, image_size),
            expression: rec.expression,
            gold_box,
            gold_mask,
        });
    }
    if out.skipped_missing > 0 {
        log::warn!("{}: skipped {} records with missing images", root.display(), out.skipped_missing);
    }
    Ok(out)
}

/// Loads `root/<split>`, failing with `EmptyEvaluation` when the split does not exist.
pub fn load_split(root: &Path, split: &str, image_size: usize) -> Result<LoadedDataset> {
    let dir = root.join(split);
    if !dir.join("annotations.jsonl").is_file() {
        return Err(Error::EmptyEvaluation);
    }
    load_refcoco_format(&dir, image_size)
}

/// Writes samples in the dataset layout with PNG masks.
pub fn write_split(dir: &Path, samples: &[GroundingSample], meta: Option<&DatasetMeta>) -> Result<()> {
    fs::create_dir_all(dir.join("images"))?;
    fs::create_dir_all(dir.join("masks"))?;
    let mut ann = fs::File::create(dir.join("annotations.jsonl"))?;
    for s in samples {
        let image = format!("images/{}.png", s.id);
        let mask = format!("masks/{}.png", s.id);
        s.image
            .to_rgb8()
            .save_with_format(dir.join(&image), image::ImageFormat::Png)?;
        write_png_mask(&dir.join(&mask), &s.gold_mask)?;
        let (h, w) = s.gold_mask.dims();
        let [x1, y1, x2, y2] = s.gold_box.corners();
        let rec = AnnotationRecord {
            id: s.id.clone(),
            image,
            expression: s.expression.clone(),
            bbox_xywh_px: [
                x1 * w as f64,
                y1 * h as f64,
                (x2 - x1) * w as f64,
                (y2 - y1) * h as f64,
            ],
            mask: MaskField {
                polygon: None,
                png: Some(mask),
            },
        };
        writeln!(ann, "{}", serde_json::to_string(&rec)?)?;
    }
    if let Some(meta) = meta {
        fs::write(dir.join("meta.json"), serde_json::to_string_pretty(meta)? + "\n")?;
    }
    Ok(())
}

fn generate_split(dir: &Path, prefix: &str, split_idx: u64, n: usize, image_size: usize, seed: u64) -> Result<()> {
    let samples = (0..n)
        .map(|i| {
            let spec = generate_scene(derive_seed(seed, split_idx, i as u64), image_size)?;
            render_sample(&spec, format!("{prefix}-{i:06}"))
        })
        .collect::<Result<Vec<_>>>()?;
    let meta = DatasetMeta {
        seed,
        count: n,
        image_size,
        grammar_version: GRAMMAR_VERSION,
    };
    write_split(dir, &samples, Some(&meta))
}

/// Materializes `out/train` and `out/val` from disjoint seed streams.
pub fn generate_data(out: &Path, n_train: usize, n_val: usize, image_size: usize, seed: u64, force: bool) -> Result<()> {
    if out.exists() {
        let non_empty = fs::read_dir(out)?.next().is_some();
        if non_empty && !force {
            return Err(Error::DirectoryNotEmpty(PathBuf::from(out)));
        }
        for split in ["train", "val"] {
            let d = out.join(split);
            if d.exists() {
                fs::remove_dir_all(&d)?;
            }
        }
    }
    generate_split(&out.join("train"), "train", 0, n_train, image_size, seed)?;
    generate_split(&out.join("val"), "val", 1, n_val, image_size, seed)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec_line(mask: &str) -> String {
        format!(
            r#"{{"id": "a", "image": "images/a.png", "expression": "the cat", "bbox_xywh_px": [10, 10, 20, 20], "mask": {mask}}}"#
        )
    }

    #[test]
    fn parses_polygon_record() {
        let r = parse_annotation_line(&rec_line(r#"{"polygon": [[10,10,30,10,30,30,10,30]]}"#), 1).unwrap();
        assert_eq!(r.bbox_xywh_px, [10.0, 10.0, 20.0, 20.0]);
    }

    #[test]
    fn malformed_records_report_line() {
        for (mask, line) in [
            (r#"{"polygon": [[10,10,30,10]]}"#, 3),
            (r#"{}"#, 4),
            (r#"{"polygon": [[1,1,2,2,3,3]], "png": "m.png"}"#, 5),
        ] {
            match parse_annotation_line(&rec_line(mask), line) {
                Err(Error::BadAnnotation { line: l, .. }) => assert_eq!(l, line),
                other => panic!("expected BadAnnotation, got {other:?}"),
            }
        }
        assert!(matches!(
            parse_annotation_line("{not json", 9),
            Err(Error::BadAnnotation { line: 9, .. })
        ));
    }

    #[test]
    fn loads_polygon_dataset_and_normalizes_box() {
        let dir = tempfile::tempdir().unwrap();
        fs::create_dir_all(dir.path().join("images")).unwrap();
        RgbImage::filled(100, 100, [0.5; 3])
            .to_rgb8()
            .save(dir.path().join("images/a.png"))
            .unwrap();
        let mut f = fs::File::create(dir.path().join("annotations.jsonl")).unwrap();
        writeln!(f, "{}", rec_line(r#"{"polygon": [[10,10,30,10,30,30,10,30]]}"#)).unwrap();
        let missing = rec_line(r#"{"polygon": [[10,10,30,10,30,30,10,30]]}"#).replace("images/a.png", "images/b.png");
        writeln!(f, "{missing}").unwrap();
        drop(f);
        let d = load_refcoco_format(dir.path(), 100).unwrap();
        assert_eq!(d.samples.len(), 1);
        assert_eq!(d.skipped_missing, 1);
        let s = &d.samples[0];
        assert_eq!(s.gold_mask.count(), 400);
        let b = s.gold_box.to_array();
        for (v, e) in b.iter().zip([0.2, 0.2, 0.2, 0.2]) {
            assert!((v - e).abs() < 1e-12);
        }
    }

    #[test]
    fn empty_annotation_file() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("annotations.jsonl"), "").unwrap();
        assert!(load_refcoco_format(dir.path(), 64).unwrap().samples.is_empty());
    }

    #[test]
    fn generate_round_trip_and_refuse() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("ds");
        generate_data(&out, 8, 3, 64, 1, false).unwrap();
        let train = load_refcoco_format(&out.join("train"), 64).unwrap();
        assert_eq!(train.samples.len(), 8);
        assert_eq!(fs::read_dir(out.join("train/images")).unwrap().count(), 8);
        assert!(out.join("train/meta.json").is_file());
        for s in &train.samples {
            s.validate().unwrap();
        }
        let val = load_split(&out, "val", 64).unwrap();
        assert!(val.samples.iter().all(|v| train.samples.iter().all(|t| t.id != v.id)));
        assert!(matches!(
            generate_data(&out, 8, 3, 64, 1, false),
            Err(Error::DirectoryNotEmpty(_))
        ));
        generate_data(&out, 8, 3, 64, 1, true).unwrap();
        assert!(matches!(load_split(&out, "test", 64), Err(Error::EmptyEvaluation)));
    }
}
