//! Slow, independent reference implementations for tests.
//!
//! Nothing here calls into the library's geometry, loss, metric or rasterization code; only
//! its plain data types are shared. Every routine is an explicit loop over pixels or objects
//! with integer counting wherever the quantity is a count.

use c3vg::data::{Color, SceneObject, Shape, Size};
use c3vg::geometry::{BBox, BinaryMask, DiscreteBox};
use c3vg::{Error, Result};

fn same_dims(a: &BinaryMask, b: &BinaryMask) -> Result<()> {
    if a.height() != b.height() || a.width() != b.width() {
        return Err(Error::ShapeMismatch {
            expected: vec![a.height(), a.width()],
            actual: vec![b.height(), b.width()],
        });
    }
    Ok(())
}

fn count(mask: &BinaryMask) -> u64 {
    let mut n = 0;
    for y in 0..mask.height() {
        for x in 0..mask.width() {
            if mask.get(y, x) {
                n += 1;
            }
        }
    }
    n
}

/// `(intersection, union)` pixel counts.
pub fn oracle_counts(a: &BinaryMask, b: &BinaryMask) -> Result<(u64, u64)> {
    same_dims(a, b)?;
    let (mut inter, mut union) = (0u64, 0u64);
    for y in 0..a.height() {
        for x in 0..a.width() {
            let (p, q) = (a.get(y, x), b.get(y, x));
            if p && q {
                inter += 1;
            }
            if p || q {
                union += 1;
            }
        }
    }
    Ok((inter, union))
}

/// Intersection over union of two masks; two empty masks agree perfectly.
pub fn oracle_pixel_iou(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    let (inter, union) = oracle_counts(a, b)?;
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// Cells of a `w x h` grid whose unit square overlaps the open box interior.
pub fn oracle_box_cells(b: &BBox, w: usize, h: usize) -> DiscreteBox {
    let (x1, x2) = ((b.cx - b.w / 2.0) * w as f64, (b.cx + b.w / 2.0) * w as f64);
    let (y1, y2) = ((b.cy - b.h / 2.0) * h as f64, (b.cy + b.h / 2.0) * h as f64);
    let overlaps = |i: usize, lo: f64, hi: f64| (i as f64) < hi && (i as f64 + 1.0) > lo;
    let xs: Vec<usize> = (0..w).filter(|&i| overlaps(i, x1, x2)).collect();
    let ys: Vec<usize> = (0..h).filter(|&i| overlaps(i, y1, y2)).collect();
    match (xs.first(), xs.last(), ys.first(), ys.last()) {
        (Some(&a), Some(&b), Some(&c), Some(&d)) => DiscreteBox {
            x1: a,
            y1: c,
            x2: b + 1,
            y2: d + 1,
        },
        _ => DiscreteBox {
            x1: 0,
            y1: 0,
            x2: 0,
            y2: 0,
        },
    }
}

/// Fraction of mask pixels outside the box: `1 - |mask in box| / |mask|`.
pub fn oracle_m2b(mask: &BinaryMask, b: &DiscreteBox) -> Result<f64> {
    let total = count(mask);
    if total == 0 {
        return Err(Error::EmptyMask);
    }
    let mut inside = 0u64;
    for y in 0..mask.height() {
        for x in 0..mask.width() {
            if mask.get(y, x) && x >= b.x1 && x < b.x2 && y >= b.y1 && y < b.y2 {
                inside += 1;
            }
        }
    }
    Ok(1.0 - inside as f64 / total as f64)
}

/// Inclusive pixel extents `(x_min, y_min, x_max, y_max)` of the foreground.
pub fn oracle_extents(mask: &BinaryMask) -> Option<(usize, usize, usize, usize)> {
    let mut ext: Option<(usize, usize, usize, usize)> = None;
    for y in 0..mask.height() {
        for x in 0..mask.width() {
            if mask.get(y, x) {
                ext = Some(match ext {
                    None => (x, y, x, y),
                    Some((a, b, c, d)) => (a.min(x), b.min(y), c.max(x), d.max(y)),
                });
            }
        }
    }
    ext
}

/// Length of `[lo, hi] ∩ [a, b]`.
fn overlap_1d(lo: f64, hi: f64, a: f64, b: f64) -> f64 {
    (hi.min(b) - lo.max(a)).max(0.0)
}

/// `1 - IoU` between the mask's tight bounding box and `b`. Both are rasterized at mask
/// resolution with exact per-pixel area coverage, so the sum is dense and exact.
pub fn oracle_b2m(mask: &BinaryMask, b: &BBox) -> Result<f64> {
    let (x0, y0, x1, y1) = oracle_extents(mask).ok_or(Error::EmptyMask)?;
    let (h, w) = (mask.height(), mask.width());
    let (bx1, bx2) = ((b.cx - b.w / 2.0) * w as f64, (b.cx + b.w / 2.0) * w as f64);
    let (by1, by2) = ((b.cy - b.h / 2.0) * h as f64, (b.cy + b.h / 2.0) * h as f64);
    let (mut inter, mut box_area, mut tight_area) = (0.0, 0.0, 0.0);
    for y in 0..h {
        for x in 0..w {
            let cover = overlap_1d(x as f64, x as f64 + 1.0, bx1, bx2) * overlap_1d(y as f64, y as f64 + 1.0, by1, by2);
            box_area += cover;
            if x >= x0 && x <= x1 && y >= y0 && y <= y1 {
                tight_area += 1.0;
                inter += cover;
            }
        }
    }
    let union = box_area + tight_area - inter;
    Ok(if union <= 0.0 { 1.0 } else { 1.0 - inter / union })
}

/// Even-odd point-in-polygon test by ray casting to +x.
pub fn point_in_polygon(px: f64, py: f64, vertices: &[(f64, f64)]) -> bool {
    let mut inside = false;
    let n = vertices.len();
    for i in 0..n {
        let (xa, ya) = vertices[i];
        let (xb, yb) = vertices[(i + 1) % n];
        if (ya > py) != (yb > py) {
            let x_cross = xa + (py - ya) * (xb - xa) / (yb - ya);
            if px < x_cross {
                inside = !inside;
            }
        }
    }
    inside
}

/// Pixels whose centers fall inside the polygon.
pub fn oracle_rasterize(vertices: &[(f64, f64)], h: usize, w: usize) -> BinaryMask {
    BinaryMask::from_fn(h, w, |y, x| point_in_polygon(x as f64 + 0.5, y as f64 + 0.5, vertices))
}

/// Per-sample and dataset-level mask metrics by pixel counting: `(mIoU, oIoU)`.
pub fn oracle_miou_oiou(preds: &[BinaryMask], golds: &[BinaryMask]) -> Result<(f64, f64)> {
    if preds.is_empty() || preds.len() != golds.len() {
        return Err(Error::EmptyEvaluation);
    }
    let (mut iou_sum, mut inter_sum, mut union_sum) = (0.0, 0u64, 0u64);
    for (p, g) in preds.iter().zip(golds) {
        let (i, u) = oracle_counts(p, g)?;
        iou_sum += if u == 0 { 1.0 } else { i as f64 / u as f64 };
        inter_sum += i;
        union_sum += u;
    }
    let oiou = if union_sum == 0 { 1.0 } else { inter_sum as f64 / union_sum as f64 };
    Ok((iou_sum / preds.len() as f64, oiou))
}

/// Box IoU from corners, written out directly.
pub fn oracle_box_iou(a: &BBox, b: &BBox) -> f64 {
    let ix = overlap_1d(a.cx - a.w / 2.0, a.cx + a.w / 2.0, b.cx - b.w / 2.0, b.cx + b.w / 2.0);
    let iy = overlap_1d(a.cy - a.h / 2.0, a.cy + a.h / 2.0, b.cy - b.h / 2.0, b.cy + b.h / 2.0);
    let inter = ix * iy;
    let union = a.w * a.h + b.w * b.h - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Fraction of pairs whose boxes overlap with IoU strictly above 0.5.
pub fn oracle_prec_at_05(preds: &[BBox], golds: &[BBox]) -> f64 {
    let hits = preds.iter().zip(golds).filter(|(p, g)| oracle_box_iou(p, g) > 0.5).count();
    hits as f64 / preds.len().max(1) as f64
}

/// Descriptor words of a noun phrase: `[size] [color] shape`.
struct Noun {
    shape: Shape,
    color: Option<Color>,
    size: Option<Size>,
}

fn noun(words: &[&str]) -> Option<Noun> {
    let shape = match *words.last()? {
        "circle" => Shape::Circle,
        "square" => Shape::Square,
        "triangle" => Shape::Triangle,
        _ => return None,
    };
    let mut n = Noun {
        shape,
        color: None,
        size: None,
    };
    for w in &words[..words.len() - 1] {
        match *w {
            "small" => n.size = Some(Size::Small),
            "large" => n.size = Some(Size::Large),
            "red" => n.color = Some(Color::Red),
            "green" => n.color = Some(Color::Green),
            "blue" => n.color = Some(Color::Blue),
            "yellow" => n.color = Some(Color::Yellow),
            "purple" => n.color = Some(Color::Purple),
            "orange" => n.color = Some(Color::Orange),
            "cyan" => n.color = Some(Color::Cyan),
            "white" => n.color = Some(Color::White),
            _ => return None,
        }
    }
    Some(n)
}

fn fits(n: &Noun, o: &SceneObject) -> bool {
    o.shape == n.shape && n.color.is_none_or(|c| c == o.color) && n.size.is_none_or(|s| s == o.size)
}

/// Indices of every object matching `expression`, found by testing each object against
/// each possible anchor. Relations compare centers with a margin of `margin` pixels.
pub fn oracle_resolve(objects: &[SceneObject], expression: &str, margin: f64) -> Vec<usize> {
    let words: Vec<&str> = expression.split_whitespace().collect();
    if words.first() != Some(&"the") {
        return Vec::new();
    }
    let body = &words[1..];
    let rel_at = body
        .iter()
        .position(|w| ["left", "right", "above", "below"].contains(w));
    let Some(at) = rel_at else {
        let Some(n) = noun(body) else {
            return Vec::new();
        };
        return (0..objects.len()).filter(|&i| fits(&n, &objects[i])).collect();
    };
    let (rel, anchor_start) = match body[at] {
        "left" | "right" if body.get(at + 1) == Some(&"of") => (body[at], at + 2),
        "above" | "below" => (body[at], at + 1),
        _ => return Vec::new(),
    };
    if body.get(anchor_start) != Some(&"the") {
        return Vec::new();
    }
    let (Some(target), Some(anchor)) = (noun(&body[..at]), noun(&body[anchor_start + 1..])) else {
        return Vec::new();
    };
    let anchors: Vec<usize> = (0..objects.len()).filter(|&j| fits(&anchor, &objects[j])).collect();
    if anchors.len() != 1 {
        return Vec::new();
    }
    let b = &objects[anchors[0]];
    (0..objects.len())
        .filter(|&i| i != anchors[0] && fits(&target, &objects[i]))
        .filter(|&i| {
            let a = &objects[i];
            match rel {
                "left" => a.cx + margin < b.cx,
                "right" => a.cx > b.cx + margin,
                "above" => a.cy + margin < b.cy,
                _ => a.cy > b.cy + margin,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rect(h: usize, w: usize, x0: usize, y0: usize, x1: usize, y1: usize) -> BinaryMask {
        BinaryMask::from_fn(h, w, |y, x| x >= x0 && x < x1 && y >= y0 && y < y1)
    }

    #[test]
    fn iou_examples() {
        let a = rect(8, 8, 0, 0, 4, 4);
        assert_eq!(oracle_pixel_iou(&a, &a).unwrap(), 1.0);
        assert_eq!(oracle_pixel_iou(&a, &rect(8, 8, 4, 4, 8, 8)).unwrap(), 0.0);
        // 4-pixel overlap inside a 16-pixel union.
        let p = rect(8, 8, 0, 0, 3, 3);
        let q = rect(8, 8, 1, 1, 4, 4);
        assert_eq!(oracle_counts(&p, &q).unwrap(), (4, 14));
        let z = BinaryMask::zeros(8, 8);
        assert_eq!(oracle_pixel_iou(&z, &z).unwrap(), 1.0);
        assert!(oracle_pixel_iou(&a, &BinaryMask::zeros(4, 4)).is_err());
    }

    #[test]
    fn m2b_examples() {
        let m = rect(8, 8, 2, 2, 4, 4);
        let b = DiscreteBox { x1: 0, y1: 0, x2: 8, y2: 8 };
        assert_eq!(oracle_m2b(&m, &b).unwrap(), 0.0);
        let far = DiscreteBox { x1: 6, y1: 6, x2: 8, y2: 8 };
        assert_eq!(oracle_m2b(&m, &far).unwrap(), 1.0);
        let half = DiscreteBox { x1: 0, y1: 0, x2: 3, y2: 8 };
        assert_eq!(oracle_m2b(&m, &half).unwrap(), 0.5);
        assert!(oracle_m2b(&BinaryMask::zeros(2, 2), &b).is_err());
    }

    #[test]
    fn b2m_examples() {
        let m = rect(10, 10, 2, 3, 6, 8);
        let tight = BBox {
            cx: 0.4,
            cy: 0.55,
            w: 0.4,
            h: 0.5,
        };
        assert!(oracle_b2m(&m, &tight).unwrap().abs() < 1e-12);
        let far = BBox {
            cx: 0.9,
            cy: 0.1,
            w: 0.1,
            h: 0.1,
        };
        assert_eq!(oracle_b2m(&m, &far).unwrap(), 1.0);
    }

    #[test]
    fn box_cells_half_open() {
        let b = BBox {
            cx: 0.5,
            cy: 0.5,
            w: 0.5,
            h: 0.3,
        };
        // x in [2, 6) exactly, y in [2.8, 5.2) -> rows 2..=5.
        assert_eq!(oracle_box_cells(&b, 8, 8), DiscreteBox { x1: 2, y1: 2, x2: 6, y2: 6 });
    }

    #[test]
    fn polygon_examples() {
        let tri = [(0.0, 0.0), (4.0, 0.0), (0.0, 4.0)];
        // Four centers sit exactly on the hypotenuse and count as outside; area is 8.
        let m = oracle_rasterize(&tri, 8, 8);
        assert_eq!(count(&m), 6);
        let shifted = [(0.1, 0.1), (4.1, 0.1), (0.1, 4.1)];
        assert_eq!(count(&oracle_rasterize(&shifted, 8, 8)), 10);
        let square = [(10.0, 10.0), (30.0, 10.0), (30.0, 30.0), (10.0, 30.0)];
        assert_eq!(count(&oracle_rasterize(&square, 40, 40)), 400);
    }

    #[test]
    fn resolver_examples() {
        let o = |shape, color, cx| SceneObject {
            shape,
            color,
            size: Size::Small,
            cx,
            cy: 32.0,
        };
        let objs = [o(Shape::Circle, Color::Red, 10.0), o(Shape::Circle, Color::Blue, 40.0), o(Shape::Square, Color::Red, 55.0)];
        assert_eq!(oracle_resolve(&objs, "the square", 3.2), vec![2]);
        assert_eq!(oracle_resolve(&objs, "the circle", 3.2), vec![0, 1]);
        assert_eq!(oracle_resolve(&objs, "the red circle", 3.2), vec![0]);
        assert_eq!(oracle_resolve(&objs, "the circle left of the square", 3.2), vec![0, 1]);
        assert_eq!(oracle_resolve(&objs, "the circle right of the blue circle", 3.2), Vec::<usize>::new());
        assert_eq!(oracle_resolve(&objs, "the red circle left of the blue circle", 3.2), vec![0]);
    }
}
