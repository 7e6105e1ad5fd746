//! Resampling expressed as constant matrices so gradients flow through plain matmuls.

use candle_core::{DType, Device, Tensor};

use crate::error::Result;
use crate::geometry::{BBox, MIN_BOX_SIZE};

/// Samples per RoI bin along each axis.
const ROI_SAMPLES: usize = 2;

/// `n_out x n_in` bilinear interpolation weights (half-pixel centers, edge clamped).
pub fn bilinear_weights(n_in: usize, n_out: usize) -> Vec<f64> {
    let mut w = vec![0.0; n_out * n_in];
    let scale = n_in as f64 / n_out as f64;
    for i in 0..n_out {
        let src = ((i as f64 + 0.5) * scale - 0.5).max(0.0);
        let i0 = (src.floor() as usize).min(n_in - 1);
        let i1 = (i0 + 1).min(n_in - 1);
        let frac = src - i0 as f64;
        w[i * n_in + i0] += 1.0 - frac;
        w[i * n_in + i1] += frac;
    }
    w
}

fn weights_tensor(n_in: usize, n_out: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    Ok(Tensor::from_vec(bilinear_weights(n_in, n_out), (n_out, n_in), device)?.to_dtype(dtype)?)
}

/// Bilinear resize of the trailing two axes of `x` (`... x H x W`) to `out_h x out_w`.
pub fn resize_bilinear(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let dims = x.dims();
    let (h, w) = (dims[dims.len() - 2], dims[dims.len() - 1]);
    if (h, w) == (out_h, out_w) {
        return Ok(x.clone());
    }
    let rh = weights_tensor(h, out_h, x.dtype(), x.device())?;
    let rw_t = weights_tensor(w, out_w, x.dtype(), x.device())?.t()?;
    let cols = x.broadcast_matmul(&rw_t)?;
    Ok(rh.broadcast_matmul(&cols)?)
}

/// Bilinear sampling weights over an `h x w` grid at normalized point `(x, y)`, accumulated
/// into `row` with the given scale.
fn accumulate_bilinear(row: &mut [f64], h: usize, w: usize, x: f64, y: f64, scale: f64) {
    let fx = (x * w as f64 - 0.5).clamp(0.0, (w - 1) as f64);
    let fy = (y * h as f64 - 0.5).clamp(0.0, (h - 1) as f64);
    let x0 = fx.floor() as usize;
    let y0 = fy.floor() as usize;
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let ax = fx - x0 as f64;
    let ay = fy - y0 as f64;
    row[y0 * w + x0] += scale * (1.0 - ax) * (1.0 - ay);
    row[y0 * w + x1] += scale * ax * (1.0 - ay);
    row[y1 * w + x0] += scale * (1.0 - ax) * ay;
    row[y1 * w + x1] += scale * ax * ay;
}

/// RoI-align weights `P^2 x (h * w)` for one box: each output bin averages a 2x2 grid of
/// bilinear samples. A box whose size sits at the clamping floor pools the single cell
/// nearest its center.
pub fn roi_align_weights(b: &BBox, h: usize, w: usize, pool: usize) -> Vec<f64> {
    let n = h * w;
    let mut out = vec![0.0; pool * pool * n];
    if b.w <= MIN_BOX_SIZE || b.h <= MIN_BOX_SIZE {
        let cx = ((b.cx * w as f64).floor() as usize).min(w - 1);
        let cy = ((b.cy * h as f64).floor() as usize).min(h - 1);
        for bin in 0..pool * pool {
            out[bin * n + cy * w + cx] = 1.0;
        }
        return out;
    }
    let [x1, y1, _, _] = b.corners();
    let bin_w = b.w / pool as f64;
    let bin_h = b.h / pool as f64;
    let s = ROI_SAMPLES as f64;
    let scale = 1.0 / (s * s);
    for py in 0..pool {
        for px in 0..pool {
            let row = &mut out[(py * pool + px) * n..(py * pool + px + 1) * n];
            for sy in 0..ROI_SAMPLES {
                for sx in 0..ROI_SAMPLES {
                    let x = x1 + bin_w * (px as f64 + (sx as f64 + 0.5) / s);
                    let y = y1 + bin_h * (py as f64 + (sy as f64 + 0.5) / s);
                    accumulate_bilinear(row, h, w, x, y, scale);
                }
            }
        }
    }
    out
}

/// Stacked RoI-align weights for a batch of boxes: `B x P^2 x (h * w)`.
pub fn roi_align_batch(
    boxes: &[BBox],
    h: usize,
    w: usize,
    pool: usize,
    dtype: DType,
    device: &Device,
) -> Result<Tensor> {
    let data: Vec<f64> = boxes
        .iter()
        .flat_map(|b| roi_align_weights(b, h, w, pool))
        .collect();
    Ok(Tensor::from_vec(data, (boxes.len(), pool * pool, h * w), device)?.to_dtype(dtype)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rows_sum_to_one() {
        for (n_in, n_out) in [(2, 4), (4, 16), (7, 3), (1, 5)] {
            let w = bilinear_weights(n_in, n_out);
            for r in w.chunks(n_in) {
                assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn two_to_four_matches_reference() {
        // Half-pixel bilinear: outputs sample at -0.25 (clamped), 0.25, 0.75, 1.25 (clamped).
        let w = bilinear_weights(2, 4);
        let expect = [1.0, 0.0, 0.75, 0.25, 0.25, 0.75, 0.0, 1.0];
        for (a, b) in w.iter().zip(expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_map_stays_constant() {
        let x = Tensor::full(3.5f64, (1, 3, 5), &Device::Cpu).unwrap();
        let y = resize_bilinear(&x, 9, 11).unwrap();
        let v: Vec<f64> = y.flatten_all().unwrap().to_vec1().unwrap();
        assert_eq!(v.len(), 99);
        assert!(v.iter().all(|&a| (a - 3.5).abs() < 1e-12));
    }

    #[test]
    fn roi_rows_are_convex() {
        let b = BBox::new(0.4, 0.55, 0.3, 0.2);
        let w = roi_align_weights(&b, 6, 6, 7);
        for r in w.chunks(36) {
            assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(r.iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn degenerate_box_pools_nearest_cell() {
        let b = BBox::new(0.6, 0.1, 0.0, 0.0);
        let w = roi_align_weights(&b, 4, 4, 2);
        for r in w.chunks(16) {
            assert_eq!(r[2], 1.0);
            assert_eq!(r.iter().sum::<f64>(), 1.0);
        }
    }
}
