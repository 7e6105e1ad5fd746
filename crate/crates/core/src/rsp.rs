//! Coarse stage: a query decoder refines the object token into a box, and a text-to-pixel
//! correlation turns image tokens into a coarse mask.

use candle_core::{Tensor, D};

use crate::encoder::{masked_mean, ProjectedTokens};
use crate::error::Result;
use crate::nn::ops::add_bias;
use crate::nn::{resample, CrossAttention, Init, Linear, Mlp, ParamPath};

const POS_STD: f64 = 0.02;

/// Object-token decoder: text cross-attention, concat + MLP, then image cross-attention.
#[derive(Debug, Clone)]
pub struct QueryDecoder {
    pub query_init: Tensor,
    pub text_pos: Tensor,
    pub image_pos: Tensor,
    text_attn: CrossAttention,
    mlp: Mlp,
    image_attn: CrossAttention,
}

impl QueryDecoder {
    pub fn new(p: &mut ParamPath, d: usize, heads: usize, n_text: usize, n_image: usize) -> Result<Self> {
        Ok(Self {
            query_init: p.param("query_init", &[1, 1, d], Init::Normal(POS_STD))?,
            text_pos: p.param("text_pos", &[n_text, d], Init::Normal(POS_STD))?,
            image_pos: p.param("image_pos", &[n_image, d], Init::Normal(POS_STD))?,
            text_attn: CrossAttention::new(&mut p.pp("text_attn"), d, heads)?,
            mlp: Mlp::new(&mut p.pp("mlp"), &[2 * d, d, d])?,
            image_attn: CrossAttention::new(&mut p.pp("image_attn"), d, heads)?,
        })
    }

    /// Refined object feature `B x 1 x D`.
    pub fn forward(&self, tokens: &ProjectedTokens) -> Result<Tensor> {
        let fused = self.text_branch(tokens)?;
        let image = add_bias(&tokens.image, &self.image_pos, 1)?;
        self.image_attn.forward(&fused, &image, None)
    }

    pub fn image_attention(&self) -> &CrossAttention {
        &self.image_attn
    }

    /// Output of the concat + MLP branch, before image attention.
    pub fn text_branch(&self, tokens: &ProjectedTokens) -> Result<Tensor> {
        let text_bias = tokens.text_bias()?;
        let query = tokens.object.broadcast_add(&self.query_init)?;
        let text = add_bias(&tokens.text, &self.text_pos, 1)?;
        let attended = self.text_attn.forward(&query, &text, Some(&text_bias))?;
        self.mlp
            .forward(&Tensor::cat(&[&tokens.object, &attended], D::Minus1)?)
    }
}

/// Three-layer MLP regressing a sigmoid-bounded `(cx, cy, w, h)`.
#[derive(Debug, Clone)]
pub struct BoxHead {
    mlp: Mlp,
}

impl BoxHead {
    pub fn new(p: &mut ParamPath, d: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            mlp: Mlp::new(&mut p.pp("mlp"), &[d, hidden, hidden, 4])?,
        })
    }

    /// `B x 1 x D` (or `B x D`) -> `B x 4`.
    pub fn forward(&self, feature: &Tensor) -> Result<Tensor> {
        let x = if feature.rank() == 3 {
            feature.squeeze(1)?
        } else {
            feature.clone()
        };
        Ok(candle_nn::ops::sigmoid(&self.mlp.forward(&x)?)?)
    }
}

/// Text-to-pixel correlation: per-pixel scaled dot product with a pooled sentence feature.
#[derive(Debug, Clone)]
pub struct PixelDecoder {
    sentence_proj: Linear,
    pub bias: Tensor,
}

impl PixelDecoder {
    pub fn new(p: &mut ParamPath, d: usize) -> Result<Self> {
        Ok(Self {
            sentence_proj: p.linear(d, d, "sentence_proj")?,
            bias: p.param("bias", &[1], Init::Zeros)?,
        })
    }

    /// Masked mean of the text tokens through the 1x1 projection: `B x D`.
    pub fn sentence(&self, text: &Tensor, text_mask: &Tensor) -> Result<Tensor> {
        Ok(self.sentence_proj.forward(&masked_mean(text, text_mask)?)?)
    }

    /// `pixels: B x N x D` laid out row-major over an `h x w` grid -> logits `B x h x w`.
    pub fn forward(&self, pixels: &Tensor, text: &Tensor, text_mask: &Tensor, h: usize, w: usize) -> Result<Tensor> {
        let (b, _, d) = pixels.dims3()?;
        let sentence = self.sentence(text, text_mask)?.unsqueeze(2)?; // B x D x 1
        let logits = (pixels.matmul(&sentence)? / (d as f64).sqrt())?; // B x N x 1
        Ok(logits.reshape((b, h, w))?.broadcast_add(&self.bias)?)
    }
}

/// Bilinear upsampling of `B x h x w` logits to `B x H x W`.
pub fn upsample_mask(logits: &Tensor, height: usize, width: usize) -> Result<Tensor> {
    resample::resize_bilinear(logits, height, width)
}
