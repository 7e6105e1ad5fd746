//! Datasets: synthetic referring-expression scenes and the on-disk annotation format.

pub mod dataset;
pub mod raster;
pub mod synth;

pub use dataset::{
    decode_png_mask, generate_data, load_refcoco_format, load_split, parse_annotation_line, union_polygons, write_split,
    AnnotationRecord, DatasetMeta, LoadedDataset, MaskField,
};
pub use raster::rasterize_polygon;
pub use synth::{generate_scene, render_sample, resolve_expression, Color, SceneObject, SceneSpec, Shape, Size};

use crate::error::{Error, Result};
use crate::geometry::{mask_min_bbox, BBox, BinaryMask};
use crate::nn::resample::bilinear_weights;

/// Planar RGB image with values in `[0, 1]`, stored channel-major (`3 x H x W`).
#[derive(Debug, Clone, PartialEq)]
pub struct RgbImage {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl RgbImage {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != 3 * height * width {
            return Err(Error::ShapeMismatch {
                expected: vec![3, height, width],
                actual: vec![data.len()],
            });
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Self {
        let mut data = Vec::with_capacity(3 * height * width);
        for c in rgb {
            data.extend(std::iter::repeat_n(c, height * width));
        }
        Self { height, width, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn set(&mut self, y: usize, x: usize, rgb: [f32; 3]) {
        let plane = self.height * self.width;
        for (c, v) in rgb.into_iter().enumerate() {
            self.data[c * plane + y * self.width + x] = v;
        }
    }

    pub fn get(&self, y: usize, x: usize) -> [f32; 3] {
        let plane = self.height * self.width;
        let i = y * self.width + x;
        [self.data[i], self.data[plane + i], self.data[2 * plane + i]]
    }

    pub fn from_rgb8(img: &image::RgbImage) -> Self {
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut out = Self::filled(h, w, [0.0; 3]);
        for (x, y, p) in img.enumerate_pixels() {
            out.set(y as usize, x as usize, p.0.map(|v| f32::from(v) / 255.0));
        }
        out
    }

    pub fn to_rgb8(&self) -> image::RgbImage {
        image::RgbImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            let px = self.get(y as usize, x as usize);
            image::Rgb(px.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8))
        })
    }

    /// Bilinear resize with half-pixel centers.
    pub fn resize(&self, height: usize, width: usize) -> Self {
        if (height, width) == (self.height, self.width) {
            return self.clone();
        }
        let rh = bilinear_weights(self.height, height);
        let rw = bilinear_weights(self.width, width);
        let plane_in = self.height * self.width;
        let mut data = vec![0f32; 3 * height * width];
        for c in 0..3 {
            let src = &self.data[c * plane_in..(c + 1) * plane_in];
            // Rows first, then columns.
            let mut tmp = vec![0f64; height * self.width];
            for oy in 0..height {
                for iy in 0..self.height {
                    let wgt = rh[oy * self.height + iy];
                    if wgt != 0.0 {
                        for x in 0..self.width {
                            tmp[oy * self.width + x] += wgt * f64::from(src[iy * self.width + x]);
                        }
                    }
                }
            }
            let dst = &mut data[c * height * width..(c + 1) * height * width];
            for oy in 0..height {
                for ox in 0..width {
                    let mut acc = 0.0;
                    for ix in 0..self.width {
                        acc += rw[ox * self.width + ix] * tmp[oy * self.width + ix];
                    }
                    dst[oy * width + ox] = acc as f32;
                }
            }
        }
        Self { height, width, data }
    }
}

/// Nearest-neighbour mask resize (half-pixel centers).
pub fn resize_mask_nearest(mask: &BinaryMask, height: usize, width: usize) -> BinaryMask {
    let (h, w) = mask.dims();
    if (h, w) == (height, width) {
        return mask.clone();
    }
    BinaryMask::from_fn(height, width, |y, x| {
        let sy = (((y as f64 + 0.5) * h as f64 / height as f64).floor() as usize).min(h - 1);
        let sx = (((x as f64 + 0.5) * w as f64 / width as f64).floor() as usize).min(w - 1);
        mask.get(sy, sx)
    })
}

/// One image-expression pair with its box and mask ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundingSample {
    pub id: String,
    pub image: RgbImage,
    pub expression: String,
    pub gold_box: BBox,
    pub gold_mask: BinaryMask,
}

impl GroundingSample {
    /// Inclusive range of integer shifts `(dx_min, dx_max, dy_min, dy_max)` that keep every
    /// pixel differing from the top-left (background) color inside the frame.
    pub fn shift_range(&self) -> (isize, isize, isize, isize) {
        let (h, w) = (self.image.height(), self.image.width());
        let bg = self.image.get(0, 0);
        let (mut x0, mut y0, mut x1, mut y1) = (w, h, 0, 0);
        for y in 0..h {
            for x in 0..w {
                if self.image.get(y, x) != bg || self.gold_mask.get(y, x) {
                    x0 = x0.min(x);
                    y0 = y0.min(y);
                    x1 = x1.max(x);
                    y1 = y1.max(y);
                }
            }
        }
        if x0 > x1 {
            return (0, 0, 0, 0);
        }
        let (w, h) = (w as isize, h as isize);
        (-(x0 as isize), w - 1 - x1 as isize, -(y0 as isize), h - 1 - y1 as isize)
    }

    /// Moves the content by `(dx, dy)` pixels, filling with the top-left color. Shifts outside
    /// [`Self::shift_range`] would cut objects and are the caller's responsibility.
    pub fn translate(&self, dx: isize, dy: isize) -> Self {
        let (h, w) = (self.image.height(), self.image.width());
        let bg = self.image.get(0, 0);
        let src = |y: usize, x: usize| -> Option<(usize, usize)> {
            let sy = y as isize - dy;
            let sx = x as isize - dx;
            ((0..h as isize).contains(&sy) && (0..w as isize).contains(&sx)).then_some((sy as usize, sx as usize))
        };
        let mut image = RgbImage::filled(h, w, bg);
        for y in 0..h {
            for x in 0..w {
                if let Some((sy, sx)) = src(y, x) {
                    image.set(y, x, self.image.get(sy, sx));
                }
            }
        }
        let gold_mask = BinaryMask::from_fn(h, w, |y, x| src(y, x).is_some_and(|(sy, sx)| self.gold_mask.get(sy, sx)));
        let b = self.gold_box;
        Self {
            id: self.id.clone(),
            image,
            expression: self.expression.clone(),
            gold_box: BBox::new(b.cx + dx as f64 / w as f64, b.cy + dy as f64 / h as f64, b.w, b.h),
            gold_mask,
        }
    }

    /// Mirror image: flips pixels, mask and box left-right and swaps the words "left" and
    /// "right", so horizontal relations in the expression still hold.
    pub fn hflip(&self) -> Self {
        let (h, w) = (self.image.height(), self.image.width());
        let mut data = self.image.as_slice().to_vec();
        for row in data.chunks_exact_mut(w) {
            row.reverse();
        }
        let (mh, mw) = self.gold_mask.dims();
        let expression = self
            .expression
            .split_whitespace()
            .map(|word| match word {
                "left" => "right",
                "right" => "left",
                other => other,
            })
            .collect::<Vec<_>>()
            .join(" ");
        let b = self.gold_box;
        Self {
            id: self.id.clone(),
            image: RgbImage { height: h, width: w, data },
            expression,
            gold_box: BBox::new(1.0 - b.cx, b.cy, b.w, b.h),
            gold_mask: BinaryMask::from_fn(mh, mw, |y, x| self.gold_mask.get(y, mw - 1 - x)),
        }
    }

    /// Checks the box-mask agreement (within one pixel per side) and mask non-emptiness.
    pub fn validate(&self) -> Result<()> {
        let tight = mask_min_bbox(&self.gold_mask)?;
        let (h, w) = self.gold_mask.dims();
        let a = self.gold_box.corners();
        let b = tight.corners();
        let tol = [1.0 / w as f64, 1.0 / h as f64, 1.0 / w as f64, 1.0 / h as f64];
        if a.iter().zip(b).zip(tol).any(|((x, y), t)| (x - y).abs() > t + 1e-9) {
            return Err(Error::BadAnnotation {
                line: 0,
                reason: format!("sample {}: box disagrees with mask extents", self.id),
            });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hflip_mirrors_sample() {
        let spec = synth::generate_scene(12, 64).unwrap();
        let s = synth::render_sample(&spec, "a").unwrap();
        let f = s.hflip();
        f.validate().unwrap();
        assert_eq!(f.hflip(), s);
        assert_eq!(f.image.get(3, 0), s.image.get(3, 63));
        assert!((f.gold_box.cx + s.gold_box.cx - 1.0).abs() < 1e-12);
        let g = GroundingSample { expression: "the red circle left of the right square".into(), ..s };
        assert_eq!(g.hflip().expression, "the red circle right of the left square");
    }

    #[test]
    fn translate_within_range_keeps_sample_valid() {
        let s = synth::render_sample(&synth::generate_scene(5, 64).unwrap(), "a").unwrap();
        let (x0, x1, y0, y1) = s.shift_range();
        assert!(x0 <= 0 && x1 >= 0 && y0 <= 0 && y1 >= 0);
        for (dx, dy) in [(x0, y0), (x1, y1), (x0, y1), (x1, y0)] {
            let t = s.translate(dx, dy);
            t.validate().unwrap();
            assert_eq!(t.gold_mask.count(), s.gold_mask.count());
            assert_eq!(t.translate(-dx, -dy), s);
        }
        assert_eq!(s.translate(0, 0), s);
    }

    #[test]
    fn resize_constant_image() {
        let img = RgbImage::filled(10, 6, [0.2, 0.4, 0.6]);
        let r = img.resize(5, 9);
        assert!(r.as_slice()[..45].iter().all(|v| (v - 0.2).abs() < 1e-6));
        assert!(r.as_slice()[90..].iter().all(|v| (v - 0.6).abs() < 1e-6));
    }

    #[test]
    fn nearest_mask_doubling() {
        let m = BinaryMask::from_fn(2, 2, |y, x| y == x);
        let r = resize_mask_nearest(&m, 4, 4);
        assert_eq!(r.count(), 8);
        assert!(r.get(1, 1) && !r.get(1, 2) && r.get(3, 2));
    }

    #[test]
    fn rgb8_round_trip() {
        let mut img = RgbImage::filled(3, 4, [0.0, 1.0, 0.0]);
        img.set(1, 2, [51.0 / 255.0, 0.0, 1.0]);
        assert_eq!(RgbImage::from_rgb8(&img.to_rgb8()), img);
    }
}
