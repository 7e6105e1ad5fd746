//! Evaluation metrics: box precision at IoU 0.5, mask mIoU / oIoU / accuracy, and the
//! box-mask consistency diagnostic.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{box_iou, box_to_discrete, BBox, BinaryMask};

/// Fraction of thresholded mask pixels that must fall inside the box to count as consistent.
pub const CONSISTENCY_FRACTION: f64 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    #[serde(rename = "prec_at_0.5")]
    pub prec_at_05: f64,
    pub acc_ris: f64,
    pub miou: f64,
    pub oiou: f64,
    pub consistency_rate: f64,
    #[serde(rename = "n")]
    pub n_samples: usize,
}

impl MetricReport {
    /// Computes every metric over paired predictions and gold annotations.
    pub fn compute(
        pred_boxes: &[BBox],
        pred_masks: &[BinaryMask],
        gold_boxes: &[BBox],
        gold_masks: &[BinaryMask],
    ) -> Result<Self> {
        let mut acc = MetricAccumulator::default();
        if pred_boxes.len() != gold_boxes.len()
            || pred_masks.len() != gold_masks.len()
            || pred_boxes.len() != pred_masks.len()
        {
            return Err(Error::ShapeMismatch {
                expected: vec![gold_boxes.len(), gold_masks.len()],
                actual: vec![pred_boxes.len(), pred_masks.len()],
            });
        }
        for i in 0..pred_boxes.len() {
            acc.push(&pred_boxes[i], &pred_masks[i], &gold_boxes[i], &gold_masks[i])?;
        }
        acc.finish()
    }
}

/// Streaming accumulator; the state is sums and counts, so partial accumulators merge
/// associatively.
#[derive(Debug, Clone, Default)]
pub struct MetricAccumulator {
    n: usize,
    box_hits: usize,
    mask_hits: usize,
    iou_sum: f64,
    inter_total: u64,
    union_total: u64,
    consistent: usize,
    consistency_den: usize,
}

impl MetricAccumulator {
    pub fn push(
        &mut self,
        pred_box: &BBox,
        pred_mask: &BinaryMask,
        gold_box: &BBox,
        gold_mask: &BinaryMask,
    ) -> Result<()> {
        let (inter, union) = pred_mask.overlap_counts(gold_mask)?;
        let iou = pair_iou(inter, union);
        self.n += 1;
        self.box_hits += usize::from(box_iou(pred_box, gold_box) > 0.5);
        self.mask_hits += usize::from(iou > 0.5);
        self.iou_sum += iou;
        self.inter_total += inter;
        self.union_total += union;
        if let Some(c) = is_consistent(pred_box, pred_mask) {
            self.consistency_den += 1;
            self.consistent += usize::from(c);
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &MetricAccumulator) {
        self.n += other.n;
        self.box_hits += other.box_hits;
        self.mask_hits += other.mask_hits;
        self.iou_sum += other.iou_sum;
        self.inter_total += other.inter_total;
        self.union_total += other.union_total;
        self.consistent += other.consistent;
        self.consistency_den += other.consistency_den;
    }

    pub fn finish(&self) -> Result<MetricReport> {
        if self.n == 0 {
            return Err(Error::EmptyEvaluation);
        }
        let n = self.n as f64;
        Ok(MetricReport {
            prec_at_05: self.box_hits as f64 / n,
            acc_ris: self.mask_hits as f64 / n,
            miou: self.iou_sum / n,
            oiou: if self.union_total == 0 {
                1.0
            } else {
                self.inter_total as f64 / self.union_total as f64
            },
            consistency_rate: if self.consistency_den == 0 {
                0.0
            } else {
                self.consistent as f64 / self.consistency_den as f64
            },
            n_samples: self.n,
        })
    }
}

/// Per-sample IoU with the empty-vs-empty case defined as agreement.
fn pair_iou(inter: u64, union: u64) -> f64 {
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

fn check_pairs<A, B>(a: &[A], b: &[B]) -> Result<()> {
    if a.is_empty() {
        return Err(Error::EmptyEvaluation);
    }
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch {
            expected: vec![b.len()],
            actual: vec![a.len()],
        });
    }
    Ok(())
}

/// Fraction of samples whose predicted box has IoU strictly above 0.5 with the gold box.
pub fn rec_accuracy(preds: &[BBox], golds: &[BBox]) -> Result<f64> {
    check_pairs(preds, golds)?;
    let hits = preds
        .iter()
        .zip(golds)
        .filter(|(p, g)| box_iou(p, g) > 0.5)
        .count();
    Ok(hits as f64 / preds.len() as f64)
}

fn mask_ious(preds: &[BinaryMask], golds: &[BinaryMask]) -> Result<Vec<(u64, u64)>> {
    check_pairs(preds, golds)?;
    preds
        .iter()
        .zip(golds)
        .map(|(p, g)| p.overlap_counts(g))
        .collect()
}

/// Mean of per-sample mask IoUs.
pub fn ris_miou(preds: &[BinaryMask], golds: &[BinaryMask]) -> Result<f64> {
    let counts = mask_ious(preds, golds)?;
    let sum: f64 = counts.iter().map(|&(i, u)| pair_iou(i, u)).sum();
    Ok(sum / counts.len() as f64)
}

/// Cumulative intersection over cumulative union.
pub fn ris_oiou(preds: &[BinaryMask], golds: &[BinaryMask]) -> Result<f64> {
    let counts = mask_ious(preds, golds)?;
    let (i, u) = counts
        .iter()
        .fold((0u64, 0u64), |(ai, au), &(i, u)| (ai + i, au + u));
    Ok(pair_iou(i, u))
}

/// Fraction of samples with mask IoU strictly above 0.5.
pub fn ris_accuracy(preds: &[BinaryMask], golds: &[BinaryMask]) -> Result<f64> {
    let counts = mask_ious(preds, golds)?;
    let hits = counts.iter().filter(|&&(i, u)| pair_iou(i, u) > 0.5).count();
    Ok(hits as f64 / counts.len() as f64)
}

/// `None` for an empty mask, otherwise whether at least 90% of its pixels sit inside the
/// discretized box.
pub fn is_consistent(pred_box: &BBox, mask: &BinaryMask) -> Option<bool> {
    let total = mask.count();
    if total == 0 {
        return None;
    }
    let d = box_to_discrete(pred_box, mask.width(), mask.height());
    let mut inside = 0usize;
    for y in d.y1..d.y2 {
        for x in d.x1..d.x2 {
            inside += usize::from(mask.get(y, x));
        }
    }
    Some(inside as f64 >= CONSISTENCY_FRACTION * total as f64)
}

/// Fraction of non-empty predicted masks that lie (mostly) inside their predicted box.
/// Returns 0 when every mask is empty.
pub fn consistency_rate(pred_boxes: &[BBox], pred_masks: &[BinaryMask]) -> Result<f64> {
    check_pairs(pred_boxes, pred_masks)?;
    let (hits, den) = pred_boxes
        .iter()
        .zip(pred_masks)
        .filter_map(|(b, m)| is_consistent(b, m))
        .fold((0usize, 0usize), |(h, d), c| (h + usize::from(c), d + 1));
    Ok(if den == 0 { 0.0 } else { hits as f64 / den as f64 })
}
