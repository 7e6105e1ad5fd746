//! Fine stage: a four-level feature pyramid built from the single-scale segmentation
//! feature, a UNet-style coarse-to-fine fusion decoder, and the fine mask and box heads.

use candle_core::Tensor;

use crate::error::{Error, Result};
use crate::nn::conv::conv_transpose_2x2;
use crate::nn::ops::{gelu, upsample2x};
use crate::nn::{resample, BatchNorm2d, ConvModule, Init, ParamPath};
use crate::rsp::{BoxHead, PixelDecoder};

/// Four feature maps at 1/4, 1/8, 1/16 and 1/32 of the image, finest first.
#[derive(Debug, Clone)]
pub struct FeaturePyramid {
    pub levels: [Tensor; 4],
}

impl FeaturePyramid {
    /// `(height, width)` of every level, finest first.
    pub fn spatial_dims(&self) -> Result<Vec<(usize, usize)>> {
        self.levels
            .iter()
            .map(|t| {
                let (_, _, h, w) = t.dims4()?;
                Ok((h, w))
            })
            .collect()
    }
}

/// Stride-2, kernel-2 transposed convolution doubling the spatial size.
#[derive(Debug, Clone)]
struct UpConv {
    weight: Tensor,
    bias: Tensor,
}

impl UpConv {
    fn new(p: &mut ParamPath, ch: usize, name: &str) -> Result<Self> {
        let mut p = p.pp(name);
        let fan_in = ch * 4;
        Ok(Self {
            weight: p.param("weight", &[ch, ch, 2, 2], Init::fan_in(fan_in))?,
            bias: p.param("bias", &[ch], Init::fan_in(fan_in))?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        conv_transpose_2x2(x, &self.weight, Some(&self.bias))
    }
}

/// Builds the pyramid from a 1/16-scale map with transposed convolutions (up) and max
/// pooling (down), then normalizes and projects every level.
#[derive(Debug, Clone)]
pub struct SimFpn {
    up4_a: UpConv,
    up4_norm: BatchNorm2d,
    up4_b: UpConv,
    up8: UpConv,
    proj: Vec<ConvModule>,
}

impl SimFpn {
    pub fn new(p: &mut ParamPath, d: usize) -> Result<Self> {
        Ok(Self {
            up4_a: UpConv::new(p, d, "up4_a")?,
            up4_norm: BatchNorm2d::new(&mut p.pp("up4_norm"), d)?,
            up4_b: UpConv::new(p, d, "up4_b")?,
            up8: UpConv::new(p, d, "up8")?,
            proj: (0..4)
                .map(|i| ConvModule::new(&mut p.pp(&format!("proj.{i}")), d, d, 1))
                .collect::<Result<Vec<_>>>()?,
        })
    }

    pub fn forward(&self, f_seg: &Tensor, train: bool) -> Result<FeaturePyramid> {
        let (_, _, h, w) = f_seg.dims4()?;
        if h < 2 || w < 2 {
            return Err(Error::GridTooSmall {
                height: h,
                width: w,
            });
        }
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::BadImageShape {
                height: h,
                width: w,
                reason: "feature grid sides must be even".into(),
            });
        }
        let x4 = self.up4_a.forward(f_seg)?;
        let x4 = gelu(&self.up4_norm.forward(&x4, train)?)?;
        let x4 = self.up4_b.forward(&x4)?;
        let x8 = self.up8.forward(f_seg)?;
        let x32 = f_seg.max_pool2d(2)?;
        let raw = [x4, x8, f_seg.clone(), x32];
        let mut levels = Vec::with_capacity(4);
        for (x, proj) in raw.iter().zip(&self.proj) {
            levels.push(proj.forward(x, train)?);
        }
        let levels: [Tensor; 4] = levels.try_into().expect("four pyramid levels");
        Ok(FeaturePyramid { levels })
    }
}

/// Coarse-to-fine fusion: starting at the coarsest level, each step applies two conv
/// modules, upsamples by 2 and concatenates the next finer level.
#[derive(Debug, Clone)]
pub struct UnetDecoder {
    blocks: Vec<[ConvModule; 2]>,
}

impl UnetDecoder {
    pub fn new(p: &mut ParamPath, d: usize) -> Result<Self> {
        let mut blocks = Vec::with_capacity(4);
        for i in 0..4 {
            let in_ch = if i == 0 { d } else { 2 * d };
            let mut bp = p.pp(&format!("blocks.{i}"));
            blocks.push([
                ConvModule::new(&mut bp.pp("0"), in_ch, d, 3)?,
                ConvModule::new(&mut bp.pp("1"), d, d, 3)?,
            ]);
        }
        Ok(Self { blocks })
    }

    /// Returns the fused map at the finest (1/4) pyramid resolution.
    pub fn forward(&self, pyramid: &FeaturePyramid, train: bool) -> Result<Tensor> {
        let coarse_to_fine = [
            &pyramid.levels[3],
            &pyramid.levels[2],
            &pyramid.levels[1],
            &pyramid.levels[0],
        ];
        let mut x = coarse_to_fine[0].clone();
        for (step, block) in self.blocks.iter().enumerate() {
            if step > 0 {
                let up = upsample2x(&x)?;
                x = Tensor::cat(&[&up, coarse_to_fine[step]], 1)?;
            }
            x = block[0].forward(&x, train)?;
            x = block[1].forward(&x, train)?;
        }
        Ok(x)
    }
}

/// Fine mask logits: text-to-pixel correlation on the fused 1/4 map, upsampled to the image.
#[derive(Debug, Clone)]
pub struct FinePixelDecoder {
    pub decoder: PixelDecoder,
}

impl FinePixelDecoder {
    pub fn new(p: &mut ParamPath, d: usize) -> Result<Self> {
        Ok(Self {
            decoder: PixelDecoder::new(p, d)?,
        })
    }

    /// Returns `(grid_logits B x h x w, full_logits B x H x W)`.
    pub fn forward(
        &self,
        fused: &Tensor,
        text: &Tensor,
        text_mask: &Tensor,
        out_h: usize,
        out_w: usize,
    ) -> Result<(Tensor, Tensor)> {
        let (_, _, h, w) = fused.dims4()?;
        let pixels = fused.flatten_from(2)?.transpose(1, 2)?.contiguous()?;
        let grid = self.decoder.forward(&pixels, text, text_mask, h, w)?;
        let full = resample::resize_bilinear(&grid, out_h, out_w)?;
        Ok((grid, full))
    }
}

pub type FineBoxHead = BoxHead;
