//! Box and mask representations plus the overlap measures used by losses and metrics.
//!
//! Continuous boxes are normalized center-format `(cx, cy, w, h)`. Discrete boxes live on an
//! integer cell grid and are half-open, so `[x1, x2) x [y1, y2)` covers `(x2 - x1) * (y2 - y1)`
//! cells.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Smallest width/height a predicted box may take before any geometry.
pub const MIN_BOX_SIZE: f64 = 1e-4;

/// Scaled coordinates this close to an integer are snapped before floor/ceil.
const SNAP_EPS: f64 = 1e-9;

/// Normalized center-format box.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    /// Builds a box, clamping the center into `[0, 1]` and the size into `[MIN_BOX_SIZE, 1]`.
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self {
            cx: clamp_unit(cx),
            cy: clamp_unit(cy),
            w: clamp_size(w),
            h: clamp_size(h),
        }
    }

    /// Builds a box from corner coordinates without clamping.
    ///
    /// Corner-built boxes may extend past the unit square; they are only used as geometric
    /// operands (IoU, enclosing boxes), never fed back to the network.
    pub fn from_corners(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Self {
            cx: 0.5 * (x1 + x2),
            cy: 0.5 * (y1 + y2),
            w: (x2 - x1).max(0.0),
            h: (y2 - y1).max(0.0),
        }
    }

    pub fn from_array(v: [f64; 4]) -> Self {
        Self::new(v[0], v[1], v[2], v[3])
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.cx, self.cy, self.w, self.h]
    }

    /// `(x1, y1, x2, y2)` corners.
    pub fn corners(&self) -> [f64; 4] {
        [
            self.cx - 0.5 * self.w,
            self.cy - 0.5 * self.h,
            self.cx + 0.5 * self.w,
            self.cy + 0.5 * self.h,
        ]
    }

    pub fn area(&self) -> f64 {
        self.w.max(0.0) * self.h.max(0.0)
    }
}

fn clamp_unit(v: f64) -> f64 {
    if v.is_nan() {
        0.5
    } else {
        v.clamp(0.0, 1.0)
    }
}

fn clamp_size(v: f64) -> f64 {
    if v.is_nan() {
        MIN_BOX_SIZE
    } else {
        v.clamp(MIN_BOX_SIZE, 1.0)
    }
}

/// Half-open integer box on a cell grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct DiscreteBox {
    pub x1: usize,
    pub y1: usize,
    pub x2: usize,
    pub y2: usize,
}

impl DiscreteBox {
    pub fn new(x1: usize, y1: usize, x2: usize, y2: usize) -> Self {
        Self { x1, y1, x2, y2 }
    }

    pub fn area(&self) -> usize {
        (self.x2.saturating_sub(self.x1)) * (self.y2.saturating_sub(self.y1))
    }

    pub fn is_empty(&self) -> bool {
        self.area() == 0
    }

    pub fn contains(&self, x: usize, y: usize) -> bool {
        x >= self.x1 && x < self.x2 && y >= self.y1 && y < self.y2
    }
}

/// Row-major `{0,1}` grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    data: Vec<bool>,
}

impl BinaryMask {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![false; height * width],
        }
    }

    pub fn ones(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![true; height * width],
        }
    }

    pub fn from_vec(height: usize, width: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::ShapeMismatch {
                expected: vec![height * width],
                actual: vec![data.len()],
            });
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(f(y, x));
            }
        }
        Self {
            height,
            width,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: bool) {
        self.data[y * self.width + x] = v;
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.data
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.data.iter().any(|&v| v)
    }

    /// Mask as `0.0 / 1.0` values.
    pub fn to_f32(&self) -> Vec<f32> {
        self.data.iter().map(|&v| if v { 1.0 } else { 0.0 }).collect()
    }

    /// `(intersection, union)` pixel counts against another mask of the same size.
    pub fn overlap_counts(&self, other: &BinaryMask) -> Result<(u64, u64)> {
        if self.dims() != other.dims() {
            return Err(Error::ShapeMismatch {
                expected: vec![self.height, self.width],
                actual: vec![other.height, other.width],
            });
        }
        let mut inter = 0u64;
        let mut union = 0u64;
        for (&a, &b) in self.data.iter().zip(&other.data) {
            inter += u64::from(a && b);
            union += u64::from(a || b);
        }
        Ok((inter, union))
    }
}

/// Row-major grid of probabilities in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbMask {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl ProbMask {
    pub fn from_vec(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::ShapeMismatch {
                expected: vec![height * width],
                actual: vec![data.len()],
            });
        }
        Ok(Self {
            height,
            width,
            data: data.into_iter().map(|p| p.clamp(0.0, 1.0)).collect(),
        })
    }

    /// Applies the logistic function to raw logits.
    pub fn from_logits(height: usize, width: usize, logits: &[f64]) -> Result<Self> {
        Self::from_vec(height, width, logits.iter().map(|&l| sigmoid(l)).collect())
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn snap(v: f64) -> f64 {
    let r = v.round();
    if (v - r).abs() < SNAP_EPS {
        r
    } else {
        v
    }
}

fn floor_clamped(v: f64, hi: usize) -> usize {
    let v = snap(v).floor();
    if v <= 0.0 {
        0
    } else {
        (v as usize).min(hi)
    }
}

fn ceil_clamped(v: f64, hi: usize) -> usize {
    let v = snap(v).ceil();
    if v <= 0.0 {
        0
    } else {
        (v as usize).min(hi)
    }
}

/// Floors the top-left and ceils the bottom-right corner onto a `grid_w x grid_h` cell grid.
pub fn box_to_discrete(b: &BBox, grid_w: usize, grid_h: usize) -> DiscreteBox {
    let [x1, y1, x2, y2] = b.corners();
    let gw = grid_w as f64;
    let gh = grid_h as f64;
    let dx1 = floor_clamped(x1 * gw, grid_w);
    let dy1 = floor_clamped(y1 * gh, grid_h);
    let dx2 = ceil_clamped(x2 * gw, grid_w).max(dx1);
    let dy2 = ceil_clamped(y2 * gh, grid_h).max(dy1);
    DiscreteBox::new(dx1, dy1, dx2, dy2)
}

/// Continuous intersection-over-union; zero when either box has no area.
pub fn box_iou(a: &BBox, b: &BBox) -> f64 {
    let (inter, union) = inter_union(a, b);
    if union <= 0.0 || a.area() <= 0.0 || b.area() <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

fn inter_union(a: &BBox, b: &BBox) -> (f64, f64) {
    let [ax1, ay1, ax2, ay2] = a.corners();
    let [bx1, by1, bx2, by2] = b.corners();
    let iw = (ax2.min(bx2) - ax1.max(bx1)).max(0.0);
    let ih = (ay2.min(by2) - ay1.max(by1)).max(0.0);
    let inter = iw * ih;
    (inter, a.area() + b.area() - inter)
}

/// Generalized IoU: IoU minus the fraction of the enclosing box not covered by the union.
pub fn box_giou(a: &BBox, b: &BBox) -> f64 {
    let [ax1, ay1, ax2, ay2] = a.corners();
    let [bx1, by1, bx2, by2] = b.corners();
    let enclosing = (ax2.max(bx2) - ax1.min(bx1)) * (ay2.max(by2) - ay1.min(by1));
    if enclosing <= 0.0 {
        return 0.0;
    }
    let (_, union) = inter_union(a, b);
    box_iou(a, b) - (enclosing - union) / enclosing
}

/// Pixel extents `(x_min, y_min, x_max_exclusive, y_max_exclusive)` of the foreground.
pub fn mask_extents(mask: &BinaryMask) -> Result<DiscreteBox> {
    let mut x1 = usize::MAX;
    let mut y1 = usize::MAX;
    let mut x2 = 0;
    let mut y2 = 0;
    for y in 0..mask.height() {
        let row = &mask.as_slice()[y * mask.width()..(y + 1) * mask.width()];
        if let Some(first) = row.iter().position(|&v| v) {
            let last = row.iter().rposition(|&v| v).unwrap_or(first);
            x1 = x1.min(first);
            x2 = x2.max(last + 1);
            y1 = y1.min(y);
            y2 = y + 1;
        }
    }
    if x1 == usize::MAX {
        return Err(Error::EmptyMask);
    }
    Ok(DiscreteBox::new(x1, y1, x2, y2))
}

/// Tightest normalized box covering every foreground cell.
pub fn mask_min_bbox(mask: &BinaryMask) -> Result<BBox> {
    let d = mask_extents(mask)?;
    let w = mask.width() as f64;
    let h = mask.height() as f64;
    Ok(BBox::from_corners(
        d.x1 as f64 / w,
        d.y1 as f64 / h,
        d.x2 as f64 / w,
        d.y2 as f64 / h,
    ))
}

/// Rasterizes a discrete box: ones inside `[x1, x2) x [y1, y2)`.
pub fn box_to_mask(b: &DiscreteBox, grid_w: usize, grid_h: usize) -> BinaryMask {
    BinaryMask::from_fn(grid_h, grid_w, |y, x| b.contains(x, y))
}

/// Strict threshold: a cell is foreground iff `p > t`.
pub fn threshold_mask(p: &ProbMask, t: f64) -> BinaryMask {
    BinaryMask {
        height: p.height,
        width: p.width,
        data: p.data.iter().map(|&v| v > t).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn discrete_examples() {
        let b = BBox::new(0.5, 0.5, 0.5, 0.5);
        assert_eq!(box_to_discrete(&b, 8, 8), DiscreteBox::new(2, 2, 6, 6));
        let b = BBox::new(0.5, 0.5, 1.0, 1.0);
        assert_eq!(box_to_discrete(&b, 4, 4), DiscreteBox::new(0, 0, 4, 4));
        let b = BBox::new(0.4, 0.4, 0.3, 0.3);
        assert_eq!(box_to_discrete(&b, 10, 10), DiscreteBox::new(2, 2, 6, 6));
    }

    #[test]
    fn discrete_clamps_out_of_range() {
        let b = BBox::from_corners(-0.5, -0.5, -0.1, 2.0);
        let d = box_to_discrete(&b, 8, 8);
        assert_eq!(d, DiscreteBox::new(0, 0, 0, 8));
        assert!(d.x1 <= d.x2 && d.y1 <= d.y2);
    }

    #[test]
    fn iou_examples() {
        let a = BBox::from_corners(0.0, 0.0, 0.5, 0.5);
        assert_relative_eq!(box_iou(&a, &a), 1.0);
        let a = BBox::from_corners(0.0, 0.0, 4.0 / 8.0, 4.0 / 8.0);
        let b = BBox::from_corners(2.0 / 8.0, 2.0 / 8.0, 6.0 / 8.0, 6.0 / 8.0);
        assert_relative_eq!(box_iou(&a, &b), 1.0 / 7.0, epsilon = 1e-15);
        let c = BBox::from_corners(0.7, 0.7, 0.9, 0.9);
        assert_eq!(box_iou(&a, &c), 0.0);
    }

    #[test]
    fn iou_zero_area() {
        let a = BBox::from_corners(0.1, 0.1, 0.1, 0.5);
        let b = BBox::from_corners(0.0, 0.0, 1.0, 1.0);
        assert_eq!(box_iou(&a, &b), 0.0);
    }

    #[test]
    fn giou_examples() {
        let a = BBox::from_corners(0.1, 0.2, 0.6, 0.9);
        assert_relative_eq!(box_giou(&a, &a), 1.0);
        let a = BBox::from_corners(0.0, 0.0, 0.25, 0.25);
        let b = BBox::from_corners(0.5, 0.5, 0.75, 0.75);
        assert_relative_eq!(box_giou(&a, &b), -7.0 / 9.0, epsilon = 1e-12);
    }

    #[test]
    fn min_bbox_examples() {
        let mut m = BinaryMask::zeros(8, 8);
        m.set(3, 3, true);
        let b = mask_min_bbox(&m).unwrap();
        let c = b.corners();
        for (got, want) in c.iter().zip([3.0 / 8.0, 3.0 / 8.0, 4.0 / 8.0, 4.0 / 8.0]) {
            assert_relative_eq!(*got, want, epsilon = 1e-15);
        }
        let full = mask_min_bbox(&BinaryMask::ones(5, 7)).unwrap();
        assert_relative_eq!(full.w, 1.0);
        assert_relative_eq!(full.h, 1.0);
        assert!(matches!(
            mask_min_bbox(&BinaryMask::zeros(4, 4)),
            Err(Error::EmptyMask)
        ));
    }

    #[test]
    fn box_to_mask_examples() {
        assert_eq!(
            box_to_mask(&DiscreteBox::new(0, 0, 4, 4), 4, 4),
            BinaryMask::ones(4, 4)
        );
        assert!(box_to_mask(&DiscreteBox::new(2, 2, 2, 2), 4, 4).is_empty());
        let m = box_to_mask(&DiscreteBox::new(1, 1, 3, 3), 4, 4);
        assert_eq!(m.count(), 4);
        for (y, x) in [(1, 1), (1, 2), (2, 1), (2, 2)] {
            assert!(m.get(y, x));
        }
    }

    #[test]
    fn threshold_is_strict() {
        let half = ProbMask::from_vec(2, 2, vec![0.5; 4]).unwrap();
        assert!(threshold_mask(&half, 0.5).is_empty());
        let high = ProbMask::from_vec(2, 2, vec![0.6; 4]).unwrap();
        assert_eq!(threshold_mask(&high, 0.5).count(), 4);
        let checker = ProbMask::from_vec(2, 2, vec![0.4, 0.6, 0.6, 0.4]).unwrap();
        let m = threshold_mask(&checker, 0.5);
        assert_eq!(m.as_slice(), &[false, true, true, false]);
    }

    fn arb_box() -> impl Strategy<Value = BBox> {
        (0.05f64..0.95, 0.05f64..0.95, 0.01f64..1.0, 0.01f64..1.0)
            .prop_map(|(cx, cy, w, h)| BBox::new(cx, cy, w, h))
    }

    proptest! {
        #[test]
        fn iou_symmetric(a in arb_box(), b in arb_box()) {
            prop_assert_eq!(box_iou(&a, &b), box_iou(&b, &a));
        }

        #[test]
        fn giou_bounded_by_iou(a in arb_box(), b in arb_box()) {
            let iou = box_iou(&a, &b);
            let giou = box_giou(&a, &b);
            prop_assert!(giou <= iou + 1e-12);
            prop_assert!(giou > -1.0);
        }

        #[test]
        fn discrete_round_trip(a in arb_box(), gw in 1usize..40, gh in 1usize..40) {
            let d = box_to_discrete(&a, gw, gh);
            prop_assume!(!d.is_empty());
            let m = box_to_mask(&d, gw, gh);
            let back = mask_min_bbox(&m).unwrap();
            prop_assert_eq!(box_to_discrete(&back, gw, gh), d);
        }
    }
}
