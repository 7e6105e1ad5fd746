//! Mask-guided interaction: the coarse box and mask become spatial weight maps over the image
//! features, the weighted features are fused, and the fine-stage box and segmentation
//! features are produced by attention over text and the fused map.
//!
//! Coarse predictions enter this module detached, so fine-stage losses never reach the coarse
//! heads through it.

use candle_core::Tensor;

use crate::error::{Error, Result};
use crate::geometry::{box_to_discrete, BBox};
use crate::nn::{resample, CrossAttention, Linear, Mlp, ParamPath, SelfAttention};

/// Runtime switches for the interaction module.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MimOptions {
    /// Weight applied by the box prior.
    pub w_1: f64,
    /// Apply `w_1` outside the box instead of inside it.
    pub invert_box_weight: bool,
    pub seg_self_attention: bool,
}

impl Default for MimOptions {
    fn default() -> Self {
        Self {
            w_1: 0.1,
            invert_box_weight: false,
            seg_self_attention: true,
        }
    }
}

/// Box-region weight map on a `grid_w x grid_h` grid, row-major.
///
/// Cells inside the discretized box get `w_1` and all others `1`; `invert` swaps the regions.
/// A box that discretizes to zero area has no inside, so the literal map is all ones.
pub fn build_box_weight(b: &BBox, grid_w: usize, grid_h: usize, w_1: f64, invert: bool) -> Vec<f64> {
    let d = box_to_discrete(b, grid_w, grid_h);
    let (inside, outside) = if invert { (1.0, w_1) } else { (w_1, 1.0) };
    let mut out = Vec::with_capacity(grid_w * grid_h);
    for y in 0..grid_h {
        for x in 0..grid_w {
            out.push(if d.contains(x, y) { inside } else { outside });
        }
    }
    out
}

/// Mask prior `sigmoid(logits)` at the feature-grid resolution, detached from the graph.
pub fn build_mask_weight(coarse_logits: &Tensor, grid_h: usize, grid_w: usize) -> Result<Tensor> {
    let logits = resample::resize_bilinear(&coarse_logits.detach(), grid_h, grid_w)?;
    Ok(candle_nn::ops::sigmoid(&logits)?)
}

/// `F_u = [W_s * F, W_b * W_s * F, F]` along channels for `F: B x D x h x w`.
pub fn constrained_features(image: &Tensor, box_weight: &Tensor, mask_weight: &Tensor) -> Result<Tensor> {
    let ws = mask_weight.unsqueeze(1)?;
    let wb = box_weight.unsqueeze(1)?;
    let fs = image.broadcast_mul(&ws)?;
    let fbs = fs.broadcast_mul(&wb)?;
    Ok(Tensor::cat(&[&fs, &fbs, image], 1)?)
}

/// Intermediate and final outputs of the interaction module.
#[derive(Debug, Clone)]
pub struct MimOutput {
    /// `B x h x w`
    pub box_weight: Tensor,
    /// `B x h x w`
    pub mask_weight: Tensor,
    /// `B x 3D x h x w`
    pub fused: Tensor,
    /// `B x N x D` fused tokens after the reducing MLP.
    pub fused_reduced: Tensor,
    /// `B x 1 x D` pooled box feature.
    pub box_feature: Tensor,
    /// `B x 1 x D`
    pub f_box: Tensor,
    /// `B x D x h x w`
    pub f_seg: Tensor,
}

#[derive(Debug, Clone)]
pub struct Mim {
    opts: MimOptions,
    pool: usize,
    coord_embed: Linear,
    roi_mlp: Mlp,
    fuse_mlp: Mlp,
    box_text_attn: CrossAttention,
    box_image_attn: CrossAttention,
    seg_text_attn: CrossAttention,
    seg_self_attn: SelfAttention,
}

impl Mim {
    pub fn new(p: &mut ParamPath, d: usize, hidden: usize, heads: usize, pool: usize, opts: MimOptions) -> Result<Self> {
        let flat = pool * pool * d;
        Ok(Self {
            opts,
            pool,
            coord_embed: p.linear(4, flat, "coord_embed")?,
            roi_mlp: Mlp::new(&mut p.pp("roi_mlp"), &[flat, hidden, d])?,
            fuse_mlp: Mlp::new(&mut p.pp("fuse_mlp"), &[3 * d, hidden, d])?,
            box_text_attn: CrossAttention::new(&mut p.pp("box_text_attn"), d, heads)?,
            box_image_attn: CrossAttention::new(&mut p.pp("box_image_attn"), d, heads)?,
            seg_text_attn: CrossAttention::new(&mut p.pp("seg_text_attn"), d, heads)?,
            seg_self_attn: SelfAttention::new(&mut p.pp("seg_self_attn"), d, heads)?,
        })
    }

    pub fn options(&self) -> MimOptions {
        self.opts
    }

    pub fn set_options(&mut self, opts: MimOptions) {
        self.opts = opts;
    }

    /// Box weight maps for a batch of (detached) boxes: `B x h x w`.
    pub fn box_weights(&self, boxes: &[BBox], h: usize, w: usize, like: &Tensor) -> Result<Tensor> {
        let data: Vec<f64> = boxes
            .iter()
            .flat_map(|b| build_box_weight(b, w, h, self.opts.w_1, self.opts.invert_box_weight))
            .collect();
        Ok(Tensor::from_vec(data, (boxes.len(), h, w), like.device())?.to_dtype(like.dtype())?)
    }

    /// Fused map `F_u` and its per-pixel reduction `F_u'` (`B x N x D`).
    pub fn fuse(&self, image: &Tensor, box_weight: &Tensor, mask_weight: &Tensor) -> Result<(Tensor, Tensor)> {
        let fused = constrained_features(image, box_weight, mask_weight)?;
        let tokens = fused.flatten_from(2)?.transpose(1, 2)?.contiguous()?;
        let reduced = self.fuse_mlp.forward(&tokens)?;
        Ok((fused, reduced))
    }

    /// RoI-pooled box feature with coordinate embedding: `B x 1 x D`.
    pub fn roi_box_feature(&self, boxes: &[BBox], image_tokens: &Tensor, h: usize, w: usize) -> Result<Tensor> {
        let (b, n, d) = image_tokens.dims3()?;
        if n != h * w || b != boxes.len() {
            return Err(Error::ShapeMismatch {
                expected: vec![boxes.len(), h * w],
                actual: vec![b, n],
            });
        }
        let weights = resample::roi_align_batch(
            boxes,
            h,
            w,
            self.pool,
            image_tokens.dtype(),
            image_tokens.device(),
        )?;
        let pooled = weights.matmul(image_tokens)?.reshape((b, self.pool * self.pool * d))?;
        let coords: Vec<f64> = boxes.iter().flat_map(|bx| bx.to_array()).collect();
        let coords = Tensor::from_vec(coords, (b, 4), image_tokens.device())?
            .to_dtype(image_tokens.dtype())?;
        let x = pooled.add(&self.coord_embed.forward(&coords)?)?;
        Ok(self.roi_mlp.forward(&x)?.unsqueeze(1)?)
    }

    /// `MCA(MCA(F_b, text), F_u')`.
    pub fn box_interaction(&self, box_feature: &Tensor, text: &Tensor, text_bias: &Tensor, fused_reduced: &Tensor) -> Result<Tensor> {
        let x = self.box_text_attn.forward(box_feature, text, Some(text_bias))?;
        self.box_image_attn.forward(&x, fused_reduced, None)
    }

    /// `MSA(MCA(F_u', text))` reshaped to `B x D x h x w`.
    pub fn seg_interaction(&self, fused_reduced: &Tensor, text: &Tensor, text_bias: &Tensor, h: usize, w: usize) -> Result<Tensor> {
        let (b, _, d) = fused_reduced.dims3()?;
        let mut x = self.seg_text_attn.forward(fused_reduced, text, Some(text_bias))?;
        if self.opts.seg_self_attention {
            x = self.seg_self_attn.forward(&x)?;
        }
        Ok(x.transpose(1, 2)?.contiguous()?.reshape((b, d, h, w))?)
    }

    /// Full module. `coarse_boxes` are the detached coarse predictions and
    /// `coarse_grid_logits` the coarse mask logits at grid resolution (`B x h x w`).
    pub fn forward(
        &self,
        image_tokens: &Tensor,
        text: &Tensor,
        text_bias: &Tensor,
        coarse_boxes: &[BBox],
        coarse_grid_logits: &Tensor,
        h: usize,
        w: usize,
    ) -> Result<MimOutput> {
        let (b, _, d) = image_tokens.dims3()?;
        let image = image_tokens.transpose(1, 2)?.contiguous()?.reshape((b, d, h, w))?;
        let box_weight = self.box_weights(coarse_boxes, h, w, image_tokens)?;
        let mask_weight = build_mask_weight(coarse_grid_logits, h, w)?;
        let (fused, fused_reduced) = self.fuse(&image, &box_weight, &mask_weight)?;
        let box_feature = self.roi_box_feature(coarse_boxes, image_tokens, h, w)?;
        let f_box = self.box_interaction(&box_feature, text, text_bias, &fused_reduced)?;
        let f_seg = self.seg_interaction(&fused_reduced, text, text_bias, h, w)?;
        Ok(MimOutput {
            box_weight,
            mask_weight,
            fused,
            fused_reduced,
            box_feature,
            f_box,
            f_seg,
        })
    }
}

/// Reads a `B x 4` box tensor into clamped host boxes.
pub fn boxes_from_tensor(boxes: &Tensor) -> Result<Vec<BBox>> {
    let rows: Vec<Vec<f64>> = boxes
        .detach()
        .to_dtype(candle_core::DType::F64)?
        .to_vec2()?;
    Ok(rows
        .into_iter()
        .map(|r| BBox::new(r[0], r[1], r[2], r[3]))
        .collect())
}

/// Channel-sum of the fused map, a convenient scalar heatmap per location: `B x h x w`.
pub fn fused_heatmap(fused: &Tensor) -> Result<Tensor> {
    Ok(fused.abs()?.mean(1)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn whole_grid_box() {
        let b = BBox::new(0.5, 0.5, 1.0, 1.0);
        assert!(build_box_weight(&b, 4, 4, 0.1, false).iter().all(|&v| v == 0.1));
    }

    #[test]
    fn zero_area_box_is_all_ones() {
        let b = BBox::from_corners(0.5, 0.5, 0.5, 0.5);
        assert!(build_box_weight(&b, 4, 4, 0.1, false).iter().all(|&v| v == 1.0));
    }

    #[test]
    fn inner_cells() {
        let b = BBox::from_corners(0.25, 0.25, 0.75, 0.75);
        let w = build_box_weight(&b, 4, 4, 0.1, false);
        assert_eq!(w.iter().filter(|&&v| v == 0.1).count(), 4);
        assert_eq!(w.iter().filter(|&&v| v == 1.0).count(), 12);
        for (y, x) in [(1, 1), (1, 2), (2, 1), (2, 2)] {
            assert_eq!(w[y * 4 + x], 0.1);
        }
        let inv = build_box_weight(&b, 4, 4, 0.1, true);
        assert_eq!(inv.iter().filter(|&&v| v == 0.1).count(), 12);
    }
}
