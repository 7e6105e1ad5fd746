//! Training objectives. Every loss takes batched tensors and returns a scalar averaged over
//! the batch.
//!
//! The two consistency directions each train one branch against the other held fixed:
//! mask-to-box compares soft mask probabilities with a hard, detached box region, and
//! box-to-mask compares the continuous predicted box with the (detached) tight box around
//! the thresholded mask.

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::config::{Flags, LossWeights};
use crate::error::{Error, Result};
use crate::geometry::{box_to_discrete, mask_min_bbox, threshold_mask, BBox, ProbMask};
use crate::mim::boxes_from_tensor;
use crate::model::StageOutput;

/// Below this total soft mass the mask-to-box term is defined as zero.
pub const M2B_EMPTY_EPS: f64 = 1e-6;
const DICE_SMOOTH: f64 = 1.0;
const AREA_EPS: f64 = 1e-9;

/// `B x 4` cxcywh -> four `B` tensors `(x1, y1, x2, y2)`.
fn corners(b: &Tensor) -> Result<[Tensor; 4]> {
    let cx = b.narrow(1, 0, 1)?.squeeze(1)?;
    let cy = b.narrow(1, 1, 1)?.squeeze(1)?;
    let hw = (b.narrow(1, 2, 1)?.squeeze(1)? * 0.5)?;
    let hh = (b.narrow(1, 3, 1)?.squeeze(1)? * 0.5)?;
    Ok([(&cx - &hw)?, (&cy - &hh)?, (&cx + &hw)?, (&cy + &hh)?])
}

/// Per-box `(intersection, union, enclosing area)`, each `B`.
fn overlap_terms(a: &Tensor, b: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
    let [ax1, ay1, ax2, ay2] = corners(a)?;
    let [bx1, by1, bx2, by2] = corners(b)?;
    let iw = ax2.minimum(&bx2)?.sub(&ax1.maximum(&bx1)?)?.relu()?;
    let ih = ay2.minimum(&by2)?.sub(&ay1.maximum(&by1)?)?.relu()?;
    let inter = (iw * ih)?;
    let area_a = ((&ax2 - &ax1)? * (&ay2 - &ay1)?)?;
    let area_b = ((&bx2 - &bx1)? * (&by2 - &by1)?)?;
    let union = ((area_a + area_b)? - &inter)?;
    let ew = (ax2.maximum(&bx2)? - ax1.minimum(&bx1)?)?;
    let eh = (ay2.maximum(&by2)? - ay1.minimum(&by1)?)?;
    Ok((inter, union, (ew * eh)?))
}

/// IoU per box pair: `B`.
pub fn iou_tensor(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (inter, union, _) = overlap_terms(a, b)?;
    Ok(inter.div(&union.clamp(AREA_EPS, f64::INFINITY)?)?)
}

/// Generalized IoU per box pair: `B`.
pub fn giou_tensor(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (inter, union, enclosing) = overlap_terms(a, b)?;
    let union_c = union.clamp(AREA_EPS, f64::INFINITY)?;
    let enc_c = enclosing.clamp(AREA_EPS, f64::INFINITY)?;
    let iou = inter.div(&union_c)?;
    Ok((iou - ((&enc_c - &union)?.div(&enc_c))?)?)
}

fn check_same(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::ShapeMismatch {
            expected: a.dims().to_vec(),
            actual: b.dims().to_vec(),
        });
    }
    Ok(())
}

/// `sigma_l1 * mean|pred - gold| + sigma_giou * mean(1 - GIoU)`, boxes `B x 4` cxcywh.
pub fn rec_loss(pred: &Tensor, gold: &Tensor, w: &LossWeights) -> Result<Tensor> {
    check_same(pred, gold)?;
    let l1 = (pred - gold)?.abs()?.mean_all()?;
    let giou = giou_tensor(pred, gold)?.affine(-1.0, 1.0)?.mean_all()?;
    Ok(((l1 * w.sigma_l1)? + (giou * w.sigma_giou)?)?)
}

/// Numerically stable mean binary cross-entropy with logits.
pub fn bce_with_logits(logits: &Tensor, target: &Tensor) -> Result<Tensor> {
    // max(x, 0) - x*y + log(1 + exp(-|x|))
    let softplus = logits.abs()?.neg()?.exp()?.affine(1.0, 1.0)?.log()?;
    let l = ((logits.relu()? - (logits * target)?)? + softplus)?;
    Ok(l.mean_all()?)
}

/// Smoothed Dice loss per sample, averaged: `1 - (2 sum(p g) + 1) / (sum p + sum g + 1)`.
pub fn dice_loss(probs: &Tensor, target: &Tensor) -> Result<Tensor> {
    let b = probs.dim(0)?;
    let p = probs.reshape((b, ()))?;
    let g = target.reshape((b, ()))?;
    let num = ((p.mul(&g)?.sum(1)? * 2.0)? + DICE_SMOOTH)?;
    let den = ((p.sum(1)? + g.sum(1)?)? + DICE_SMOOTH)?;
    Ok(num.div(&den)?.affine(-1.0, 1.0)?.mean_all()?)
}

/// `sigma_dice * Dice(sigmoid(logits), gold) + sigma_bce * BCE(logits, gold)`; `B x H x W`.
pub fn ris_loss(logits: &Tensor, gold: &Tensor, w: &LossWeights) -> Result<Tensor> {
    check_same(logits, gold)?;
    let probs = candle_nn::ops::sigmoid(logits)?;
    let dice = dice_loss(&probs, gold)?;
    let bce = bce_with_logits(logits, gold)?;
    Ok(((dice * w.sigma_dice)? + (bce * w.sigma_bce)?)?)
}

/// Hard box regions on the logits grid, one `H x W` plane per (detached) box.
fn box_region(boxes: &[BBox], h: usize, w: usize, like: &Tensor) -> Result<Tensor> {
    let mut data = Vec::with_capacity(boxes.len() * h * w);
    for b in boxes {
        let d = box_to_discrete(b, w, h);
        for y in 0..h {
            for x in 0..w {
                data.push(if d.contains(x, y) { 1.0f64 } else { 0.0 });
            }
        }
    }
    Ok(Tensor::from_vec(data, (boxes.len(), h, w), like.device())?.to_dtype(like.dtype())?)
}

/// Mask-to-box consistency: share of soft mask mass outside the discretized box.
///
/// `logits: B x H x W`; the boxes are constants. Samples whose soft mass is below
/// [`M2B_EMPTY_EPS`] contribute zero.
pub fn loss_m2b(logits: &Tensor, boxes: &[BBox]) -> Result<Tensor> {
    let (b, h, w) = logits.dims3()?;
    if boxes.len() != b {
        return Err(Error::ShapeMismatch {
            expected: vec![b],
            actual: vec![boxes.len()],
        });
    }
    let s = candle_nn::ops::sigmoid(logits)?;
    let region = box_region(boxes, h, w, logits)?;
    let total = s.reshape((b, ()))?.sum(1)?;
    let inside = s.mul(&region)?.reshape((b, ()))?.sum(1)?;
    let mass: Vec<f64> = total.detach().to_dtype(DType::F64)?.to_vec1()?;
    let keep: Vec<f64> = mass.iter().map(|&m| f64::from(u8::from(m >= M2B_EMPTY_EPS))).collect();
    let keep = Tensor::from_vec(keep, b, logits.device())?.to_dtype(logits.dtype())?;
    let ratio = inside.div(&total.clamp(M2B_EMPTY_EPS, f64::INFINITY)?)?;
    let per = ratio.affine(-1.0, 1.0)?.mul(&keep)?;
    Ok(per.mean_all()?)
}

/// Tight box around `sigmoid(logits) > t` for each sample; `None` for empty masks.
pub fn mask_boxes(logits: &Tensor, t: f64) -> Result<Vec<Option<BBox>>> {
    let (b, h, w) = logits.dims3()?;
    let flat: Vec<f64> = logits.detach().to_dtype(DType::F64)?.flatten_all()?.to_vec1()?;
    (0..b)
        .map(|i| {
            let p = ProbMask::from_logits(h, w, &flat[i * h * w..(i + 1) * h * w])?;
            match mask_min_bbox(&threshold_mask(&p, t)) {
                Ok(bb) => Ok(Some(bb)),
                Err(Error::EmptyMask) => Ok(None),
                Err(e) => Err(e),
            }
        })
        .collect()
}

/// Box-to-mask consistency: `1 - IoU(pred_box, tight box of the thresholded mask)`.
///
/// Gradient reaches only `pred_boxes` (`B x 4`). Samples with an empty thresholded mask
/// contribute zero.
pub fn loss_b2m(logits: &Tensor, pred_boxes: &Tensor, t: f64) -> Result<Tensor> {
    let b = pred_boxes.dim(0)?;
    let targets = mask_boxes(logits, t)?;
    if targets.len() != b {
        return Err(Error::ShapeMismatch {
            expected: vec![b],
            actual: vec![targets.len()],
        });
    }
    let mut gold = Vec::with_capacity(4 * b);
    let mut keep = Vec::with_capacity(b);
    for tb in &targets {
        match tb {
            Some(bb) => {
                gold.extend(bb.to_array());
                keep.push(1.0f64);
            }
            None => {
                gold.extend([0.5, 0.5, 1.0, 1.0]);
                keep.push(0.0);
            }
        }
    }
    let dev = pred_boxes.device();
    let dt = pred_boxes.dtype();
    let gold = Tensor::from_vec(gold, (b, 4), dev)?.to_dtype(dt)?;
    let keep = Tensor::from_vec(keep, b, dev)?.to_dtype(dt)?;
    let per = iou_tensor(pred_boxes, &gold)?.affine(-1.0, 1.0)?.mul(&keep)?;
    Ok(per.mean_all()?)
}

/// Both consistency directions for one stage.
#[derive(Debug, Clone)]
pub struct BccTerms {
    pub b2m: Tensor,
    pub m2b: Tensor,
    /// `lambda_1 * b2m + lambda_2 * m2b`
    pub total: Tensor,
}

pub fn loss_bcc(logits: &Tensor, pred_boxes: &Tensor, w: &LossWeights) -> Result<BccTerms> {
    let host = boxes_from_tensor(pred_boxes)?;
    let m2b = loss_m2b(logits, &host)?;
    let b2m = loss_b2m(logits, pred_boxes, w.t)?;
    let total = ((&b2m * w.lambda_1)? + (&m2b * w.lambda_2)?)?;
    Ok(BccTerms { b2m, m2b, total })
}

/// Scalar parts of the total loss, one JSON line per training step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub rec_coarse: f64,
    pub ris_coarse: f64,
    pub rec_fine: f64,
    pub ris_fine: f64,
    pub m2b: f64,
    pub b2m: f64,
    pub total: f64,
}

impl LossReport {
    /// Builds a report whose `total` is the weighted composition of the parts.
    pub fn from_parts(rec_coarse: f64, ris_coarse: f64, rec_fine: f64, ris_fine: f64, m2b: f64, b2m: f64, w: &LossWeights) -> Self {
        let mut r = Self {
            rec_coarse,
            ris_coarse,
            rec_fine,
            ris_fine,
            m2b,
            b2m,
            total: 0.0,
        };
        r.total = r.compose(w);
        r
    }

    /// `lambda_c (lambda_rec rec_c + ris_c) + (lambda_rec rec_f + ris_f)
    ///  + lambda_bcc (lambda_1 b2m + lambda_2 m2b)`
    pub fn compose(&self, w: &LossWeights) -> f64 {
        let coarse = w.lambda_rec * self.rec_coarse + self.ris_coarse;
        let fine = w.lambda_rec * self.rec_fine + self.ris_fine;
        let bcc = w.lambda_1 * self.b2m + w.lambda_2 * self.m2b;
        w.lambda_c * coarse + fine + w.lambda_bcc * bcc
    }

    pub fn is_finite(&self) -> bool {
        [
            self.rec_coarse,
            self.ris_coarse,
            self.rec_fine,
            self.ris_fine,
            self.m2b,
            self.b2m,
            self.total,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

/// Differentiable total plus its scalar report.
#[derive(Debug, Clone)]
pub struct LossTerms {
    pub total: Tensor,
    pub report: LossReport,
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// Weighted total over both stages. The consistency loss uses the fine stage, and the
/// coarse stage too when `flags.bcc_on_coarse` is set (its terms are then added to the
/// reported `m2b`/`b2m`).
pub fn total_loss(
    coarse: &StageOutput,
    fine: &StageOutput,
    gold_boxes: &Tensor,
    gold_masks: &Tensor,
    w: &LossWeights,
    flags: &Flags,
) -> Result<LossTerms> {
    let rec_c = rec_loss(&coarse.boxes, gold_boxes, w)?;
    let ris_c = ris_loss(&coarse.mask_logits, gold_masks, w)?;
    let rec_f = rec_loss(&fine.boxes, gold_boxes, w)?;
    let ris_f = ris_loss(&fine.mask_logits, gold_masks, w)?;
    let mut bcc = loss_bcc(&fine.mask_logits, &fine.boxes, w)?;
    if flags.bcc_on_coarse {
        let c = loss_bcc(&coarse.mask_logits, &coarse.boxes, w)?;
        bcc = BccTerms {
            b2m: (&bcc.b2m + &c.b2m)?,
            m2b: (&bcc.m2b + &c.m2b)?,
            total: (&bcc.total + &c.total)?,
        };
    }
    let coarse_part = ((&rec_c * w.lambda_rec)? + &ris_c)?;
    let fine_part = ((&rec_f * w.lambda_rec)? + &ris_f)?;
    let total = (((coarse_part * w.lambda_c)? + fine_part)? + (&bcc.total * w.lambda_bcc)?)?;
    let report = LossReport::from_parts(
        scalar(&rec_c)?,
        scalar(&ris_c)?,
        scalar(&rec_f)?,
        scalar(&ris_f)?,
        scalar(&bcc.m2b)?,
        scalar(&bcc.b2m)?,
        w,
    );
    Ok(LossTerms { total, report })
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    fn t2(rows: &[[f64; 4]]) -> Tensor {
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        Tensor::from_vec(flat, (rows.len(), 4), &Device::Cpu).unwrap()
    }

    fn s(t: &Tensor) -> f64 {
        scalar(t).unwrap()
    }

    fn cxcywh(x1: f64, y1: f64, x2: f64, y2: f64) -> [f64; 4] {
        BBox::from_corners(x1, y1, x2, y2).to_array()
    }

    #[test]
    fn rec_loss_examples() {
        let w = LossWeights::default();
        let a = t2(&[cxcywh(0.1, 0.2, 0.5, 0.7)]);
        assert!(s(&rec_loss(&a, &a, &w).unwrap()).abs() < 1e-12);
        let p = t2(&[cxcywh(0.0, 0.0, 0.25, 0.25)]);
        let g = t2(&[cxcywh(0.5, 0.5, 0.75, 0.75)]);
        let expected = 0.5 * 0.25 + 0.2 * (16.0 / 9.0);
        assert!((s(&rec_loss(&p, &g, &w).unwrap()) - expected).abs() < 1e-12);
    }

    #[test]
    fn ris_loss_examples() {
        let w = LossWeights::default();
        let (h, wd) = (4usize, 4usize);
        let gold: Vec<f64> = (0..16).map(|i| f64::from(u8::from(i < 8))).collect();
        let gold = Tensor::from_vec(gold, (1, h, wd), &Device::Cpu).unwrap();
        let logits = ((&gold * 100.0).unwrap() - 50.0).unwrap();
        assert!(s(&ris_loss(&logits, &gold, &w).unwrap()) < 1e-6 + 1.0 / 17.0);
        let zeros = Tensor::zeros((1, h, wd), DType::F64, &Device::Cpu).unwrap();
        let (n, g) = (16.0, 8.0);
        let dice = 1.0 - (2.0 * 0.5 * g + 1.0) / (0.5 * n + g + 1.0);
        let expected = dice + std::f64::consts::LN_2;
        assert!((s(&ris_loss(&zeros, &gold, &w).unwrap()) - expected).abs() < 1e-12);
        let bad = Tensor::zeros((1, 3, 4), DType::F64, &Device::Cpu).unwrap();
        assert!(matches!(ris_loss(&bad, &gold, &w), Err(Error::ShapeMismatch { .. })));
    }

    fn plane(f: impl Fn(usize, usize) -> f64, h: usize, w: usize) -> Tensor {
        let v: Vec<f64> = (0..h * w).map(|i| f(i / w, i % w)).collect();
        Tensor::from_vec(v, (1, h, w), &Device::Cpu).unwrap()
    }

    #[test]
    fn m2b_examples() {
        let bx = BBox::from_corners(0.0, 0.0, 0.5, 1.0);
        let inside = plane(|_, x| if x < 4 { 50.0 } else { -50.0 }, 8, 8);
        assert!(s(&loss_m2b(&inside, &[bx]).unwrap()).abs() < 1e-12);
        let flat = plane(|_, _| 0.0, 8, 8);
        assert!((s(&loss_m2b(&flat, &[bx]).unwrap()) - 0.5).abs() < 1e-12);
        let empty = plane(|_, _| -1e3, 8, 8);
        assert_eq!(s(&loss_m2b(&empty, &[bx]).unwrap()), 0.0);
    }

    #[test]
    fn b2m_examples() {
        let mask = plane(|y, x| if (2..6).contains(&x) && (2..6).contains(&y) { 50.0 } else { -50.0 }, 8, 8);
        let exact = t2(&[cxcywh(0.25, 0.25, 0.75, 0.75)]);
        assert!(s(&loss_b2m(&mask, &exact, 0.5).unwrap()).abs() < 1e-12);
        let shifted = t2(&[cxcywh(0.0, 0.0, 0.5, 0.5)]);
        assert!((s(&loss_b2m(&mask, &shifted, 0.5).unwrap()) - 6.0 / 7.0).abs() < 1e-12);
        let empty = plane(|_, _| -50.0, 8, 8);
        assert_eq!(s(&loss_b2m(&empty, &shifted, 0.5).unwrap()), 0.0);
    }

    #[test]
    fn composition() {
        let w = LossWeights::default();
        let r = LossReport::from_parts(1.0, 1.0, 1.0, 1.0, 1.0, 1.0, &w);
        assert!((r.total - 2.35).abs() <= 1e-12);
        let w0 = LossWeights {
            lambda_c: 0.0,
            ..w
        };
        let a = LossReport::from_parts(7.0, 9.0, 1.0, 1.0, 1.0, 1.0, &w0);
        let b = LossReport::from_parts(0.0, 0.0, 1.0, 1.0, 1.0, 1.0, &w0);
        assert_eq!(a.total, b.total);
    }

    #[test]
    fn bcc_weights() {
        let w = LossWeights::default();
        let mask = plane(|_, x| if x < 4 { 50.0 } else { -50.0 }, 8, 8);
        // Box over the full height and x in [0.25, 0.75): half the mask inside, IoU with
        // the mask box [0, 0.5) is 1/3.
        let bx = t2(&[cxcywh(0.25, 0.0, 0.75, 1.0)]);
        let terms = loss_bcc(&mask, &bx, &w).unwrap();
        assert!((s(&terms.m2b) - 0.5).abs() < 1e-12);
        assert!((s(&terms.b2m) - 2.0 / 3.0).abs() < 1e-12);
        assert!((s(&terms.total) - (2.0 / 3.0 + 1.5)).abs() < 1e-12);
    }
}
