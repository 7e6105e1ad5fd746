//! One-stream multimodal encoder: an object token, image patches and text tokens are
//! concatenated into one sequence and processed by a stack of self-attention blocks.

use candle_core::{DType, Module, Tensor, D};
use candle_nn::Embedding;

use crate::config::EncoderConfig;
use crate::error::{Error, Result};
use crate::nn::conv::patch_embed;
use crate::nn::ops::add_bias;
use crate::nn::{key_padding_bias, Init, LayerNorm, Linear, ParamPath, TransformerBlock};

const EMBED_STD: f64 = 0.02;

/// Encoder outputs split back into their three groups.
#[derive(Debug, Clone)]
pub struct TokenBundle {
    /// `B x 1 x C`
    pub object: Tensor,
    /// `B x N_t x C`
    pub text: Tensor,
    /// `B x N_i x C`
    pub image: Tensor,
    /// `B x N_t`, `1` for real tokens and `0` for padding.
    pub text_mask: Tensor,
}

#[derive(Debug, Clone)]
pub struct Encoder {
    cfg: EncoderConfig,
    grid: (usize, usize),
    patch_weight: Tensor,
    patch_bias: Tensor,
    row_pos: Tensor,
    col_pos: Tensor,
    token_embed: Embedding,
    text_pos: Tensor,
    object_token: Tensor,
    blocks: Vec<TransformerBlock>,
    norm: LayerNorm,
}

impl Encoder {
    pub fn new(p: &mut ParamPath, cfg: &EncoderConfig, image_size: usize) -> Result<Self> {
        if cfg.vocab_size < 2 {
            return Err(Error::Config("vocab_size must be resolved before building".into()));
        }
        let c = cfg.encoder_width;
        let ps = cfg.patch_size;
        let g = image_size / ps;
        let w = p
            .pp("patch_embed")
            .param("weight", &[c, 3, ps, ps], Init::fan_in(3 * ps * ps))?;
        let b = p
            .pp("patch_embed")
            .param("bias", &[c], Init::fan_in(3 * ps * ps))?;
        let token_embed = Embedding::new(
            p.param("token_embed", &[cfg.vocab_size, c], Init::Normal(EMBED_STD))?,
            c,
        );
        let blocks = (0..cfg.depth)
            .map(|i| TransformerBlock::new(&mut p.pp(&format!("blocks.{i}")), c, cfg.heads))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            cfg: cfg.clone(),
            grid: (g, g),
            patch_weight: w,
            patch_bias: b,
            row_pos: p.param("row_pos", &[g, c], Init::Normal(EMBED_STD))?,
            col_pos: p.param("col_pos", &[g, c], Init::Normal(EMBED_STD))?,
            token_embed,
            text_pos: p.param("text_pos", &[cfg.max_text_len, c], Init::Normal(EMBED_STD))?,
            object_token: p.param("object_token", &[1, 1, c], Init::Normal(EMBED_STD))?,
            blocks,
            norm: LayerNorm::new(&mut p.pp("norm"), c)?,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    /// Patch grid `(rows, cols)`.
    pub fn grid(&self) -> (usize, usize) {
        self.grid
    }

    /// Patch embeddings plus factorized 2-D position embeddings: `B x N_i x C`.
    pub fn embed_image(&self, images: &Tensor) -> Result<Tensor> {
        let (_, ch, h, w) = images.dims4()?;
        let ps = self.cfg.patch_size;
        if ch != 3 || h % ps != 0 || w % ps != 0 || h == 0 || w == 0 {
            return Err(Error::BadImageShape {
                height: h,
                width: w,
                reason: format!("expected 3 channels with sides divisible by {ps}"),
            });
        }
        if (h / ps, w / ps) != self.grid {
            return Err(Error::BadImageShape {
                height: h,
                width: w,
                reason: format!(
                    "model was built for a {}x{} patch grid",
                    self.grid.0, self.grid.1
                ),
            });
        }
        let x = patch_embed(images, &self.patch_weight, &self.patch_bias, ps)?; // B x N_i x C
        add_bias(&x, &self.image_pos()?, 1)
    }

    fn image_pos(&self) -> Result<Tensor> {
        let (gh, gw) = self.grid;
        let c = self.cfg.encoder_width;
        let rows = self.row_pos.reshape((gh, 1, c))?;
        let cols = self.col_pos.reshape((1, gw, c))?;
        Ok(rows.broadcast_add(&cols)?.reshape((gh * gw, c))?)
    }

    /// Token plus 1-D position embeddings: `B x N_t x C`.
    pub fn embed_text(&self, text_ids: &Tensor) -> Result<Tensor> {
        let (_, n) = text_ids.dims2()?;
        if n != self.cfg.max_text_len {
            return Err(Error::ShapeMismatch {
                expected: vec![self.cfg.max_text_len],
                actual: vec![n],
            });
        }
        let x = self.token_embed.forward(text_ids)?;
        add_bias(&x, &self.text_pos, 1)
    }

    /// Runs the joint sequence `[object | patches | words]` through the encoder stack.
    pub fn forward(&self, images: &Tensor, text_ids: &Tensor, text_mask: &Tensor) -> Result<TokenBundle> {
        let img = self.embed_image(images)?;
        let txt = self.embed_text(text_ids)?;
        self.forward_embedded(&img, &txt, text_mask)
    }

    /// Encoder stack on precomputed embeddings.
    pub fn forward_embedded(&self, img: &Tensor, txt: &Tensor, text_mask: &Tensor) -> Result<TokenBundle> {
        let (b, n_i, c) = img.dims3()?;
        let n_t = txt.dim(1)?;
        let obj = self.object_token.broadcast_as((b, 1, c))?;
        let mut x = Tensor::cat(&[&obj, img, txt], 1)?;
        let mask = text_mask.to_dtype(x.dtype())?;
        let valid = Tensor::ones((b, 1 + n_i), x.dtype(), x.device())?;
        let bias = key_padding_bias(&Tensor::cat(&[&valid, &mask], 1)?)?;
        for blk in &self.blocks {
            x = blk.forward(&x, Some(&bias))?;
        }
        let x = self.norm.forward(&x)?;
        Ok(TokenBundle {
            object: x.narrow(1, 0, 1)?,
            image: x.narrow(1, 1, n_i)?,
            text: x.narrow(1, 1 + n_i, n_t)?,
            text_mask: mask,
        })
    }
}

/// Projected token groups sharing width `D`.
#[derive(Debug, Clone)]
pub struct ProjectedTokens {
    pub object: Tensor,
    pub text: Tensor,
    pub image: Tensor,
    pub text_mask: Tensor,
}

impl ProjectedTokens {
    /// Additive attention bias that hides padded text positions.
    pub fn text_bias(&self) -> Result<Tensor> {
        key_padding_bias(&self.text_mask)
    }
}

/// Three unshared linear maps `C -> D`, one per token group.
#[derive(Debug, Clone)]
pub struct TokenProjection {
    pub object: Linear,
    pub text: Linear,
    pub image: Linear,
}

impl TokenProjection {
    pub fn new(p: &mut ParamPath, c: usize, d: usize) -> Result<Self> {
        Ok(Self {
            object: p.linear(c, d, "object")?,
            text: p.linear(c, d, "text")?,
            image: p.linear(c, d, "image")?,
        })
    }

    pub fn forward(&self, bundle: &TokenBundle) -> Result<ProjectedTokens> {
        Ok(ProjectedTokens {
            object: self.object.forward(&bundle.object)?,
            text: self.text.forward(&bundle.text)?,
            image: self.image.forward(&bundle.image)?,
            text_mask: bundle.text_mask.clone(),
        })
    }
}

/// Masked mean over the token axis: `B x N x D`, mask `B x N` -> `B x D`.
pub fn masked_mean(tokens: &Tensor, mask: &Tensor) -> Result<Tensor> {
    let m = mask.to_dtype(tokens.dtype())?.unsqueeze(D::Minus1)?;
    let sum = tokens.broadcast_mul(&m)?.sum(1)?;
    let count = m.sum(1)?.clamp(1.0, f64::INFINITY)?;
    Ok(sum.broadcast_div(&count)?)
}

/// Converts `{true,false}` validity rows into a float mask tensor.
pub fn mask_tensor(rows: &[Vec<bool>], dtype: DType, device: &candle_core::Device) -> Result<Tensor> {
    let n = rows.first().map_or(0, Vec::len);
    let data: Vec<f32> = rows
        .iter()
        .flat_map(|r| r.iter().map(|&v| if v { 1.0 } else { 0.0 }))
        .collect();
    Ok(Tensor::from_vec(data, (rows.len(), n), device)?.to_dtype(dtype)?)
}
