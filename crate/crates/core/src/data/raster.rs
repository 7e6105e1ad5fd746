//! Polygon rasterization by pixel-center sampling.

use crate::error::{Error, Result};
use crate::geometry::BinaryMask;

/// Even-odd scanline fill. A pixel is foreground iff its center `(x + 0.5, y + 0.5)` lies
/// inside the polygon.
pub fn rasterize_polygon(vertices: &[(f64, f64)], height: usize, width: usize) -> Result<BinaryMask> {
    if vertices.len() < 3 {
        return Err(Error::BadAnnotation {
            line: 0,
            reason: format!("polygon needs at least 3 vertices, got {}", vertices.len()),
        });
    }
    if vertices.iter().any(|(x, y)| !x.is_finite() || !y.is_finite()) {
        return Err(Error::BadAnnotation {
            line: 0,
            reason: "polygon has non-finite coordinates".into(),
        });
    }
    let mut mask = BinaryMask::zeros(height, width);
    let mut crossings: Vec<f64> = Vec::new();
    for row in 0..height {
        let yc = row as f64 + 0.5;
        crossings.clear();
        for i in 0..vertices.len() {
            let (x0, y0) = vertices[i];
            let (x1, y1) = vertices[(i + 1) % vertices.len()];
            // Half-open rule on y so shared vertices are counted once.
            if (y0 <= yc) != (y1 <= yc) {
                crossings.push(x0 + (yc - y0) * (x1 - x0) / (y1 - y0));
            }
        }
        crossings.sort_by(|a, b| a.total_cmp(b));
        for pair in crossings.chunks_exact(2) {
            // Columns whose centers fall in [pair[0], pair[1]).
            let start = (pair[0] - 0.5).ceil().max(0.0);
            let end = (pair[1] - 0.5).ceil().min(width as f64);
            if end <= start {
                continue;
            }
            for col in start as usize..end as usize {
                mask.set(row, col, true);
            }
        }
    }
    Ok(mask)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn axis_aligned_rectangle() {
        let m = rasterize_polygon(&[(10.0, 10.0), (30.0, 10.0), (30.0, 30.0), (10.0, 30.0)], 50, 50)
            .unwrap();
        assert_eq!(m.count(), 400);
        assert!(m.get(10, 10) && m.get(29, 29));
        assert!(!m.get(30, 30) && !m.get(9, 10));
    }

    #[test]
    fn right_triangle_area() {
        // The hypotenuse passes exactly through four pixel centers, which sit on the boundary
        // and are excluded; the six strictly interior centers remain.
        let m = rasterize_polygon(&[(0.0, 0.0), (4.0, 0.0), (0.0, 4.0)], 8, 8).unwrap();
        assert_eq!(m.count(), 6);
        // Shifted off the pixel lattice the count tracks the analytic area of 8.
        let m = rasterize_polygon(&[(0.1, 0.1), (4.1, 0.1), (0.1, 4.1)], 8, 8).unwrap();
        assert!((m.count() as i64 - 8).abs() <= 2, "count {}", m.count());
    }

    #[test]
    fn too_few_vertices() {
        assert!(matches!(
            rasterize_polygon(&[(0.0, 0.0), (1.0, 1.0)], 4, 4),
            Err(Error::BadAnnotation { .. })
        ));
    }
}
