//! Convolutions expressed as reshapes plus matrix products.
//!
//! candle's CPU backward for convolutions goes through a direct-loop transposed convolution,
//! which dominates training time at these sizes; the forms here only need matmul, reshapes
//! and an explicit im2col/col2im pair in the backward pass.

use candle_core::Tensor;

use super::ops::{add_bias, im2col};
use crate::error::{Error, Result};

/// Stride-1 "same" convolution with an odd square kernel. `x: B x C x H x W`,
/// `weight: O x C x k x k` -> `B x O x H x W`.
pub fn conv2d_same(x: &Tensor, weight: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    let (o, wc, k, k2) = weight.dims4()?;
    if wc != c || k != k2 || k % 2 == 0 {
        return Err(Error::ShapeMismatch {
            expected: vec![o, c, k, k],
            actual: weight.dims().to_vec(),
        });
    }
    // Batch folded into the columns so the weight is never broadcast.
    let wm = weight.reshape((o, c * k * k))?;
    let cols = if k == 1 {
        channels_first(x)?
    } else {
        im2col(x, k)?
    };
    Ok(wm.matmul(&cols)?.reshape((o, b, h, w))?.transpose(0, 1)?)
}

/// Transposed convolution with kernel 2 and stride 2. `weight: C x O x 2 x 2`.
pub fn conv_transpose_2x2(x: &Tensor, weight: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    let (wc, o, k1, k2) = weight.dims4()?;
    if wc != c || (k1, k2) != (2, 2) {
        return Err(Error::ShapeMismatch {
            expected: vec![c, o, 2, 2],
            actual: weight.dims().to_vec(),
        });
    }
    let wm = weight.reshape((c, o * 4))?.t()?;
    let y = wm.matmul(&channels_first(x)?)?; // 4O x BHW
    let y = y
        .reshape((o, 2, 2, b, h, w))?
        .permute((3, 0, 4, 1, 5, 2))?
        .reshape((b, o, 2 * h, 2 * w))?;
    match bias {
        Some(bias) => add_bias(&y, bias, 1),
        None => Ok(y),
    }
}

/// Non-overlapping patch embedding (kernel = stride = `patch`) as tokens:
/// `B x 3 x H x W` -> `B x (H/p * W/p) x O` in row-major patch order.
pub fn patch_embed(x: &Tensor, weight: &Tensor, bias: &Tensor, patch: usize) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    let o = weight.dim(0)?;
    let (gh, gw) = (h / patch, w / patch);
    let patches = x
        .reshape((b, c, gh, patch, gw, patch))?
        .permute((0, 2, 4, 1, 3, 5))?
        .reshape((b * gh * gw, c * patch * patch))?;
    let wm = weight.reshape((o, c * patch * patch))?.t()?;
    Ok(add_bias(&patches.matmul(&wm)?, bias, 1)?.reshape((b, gh * gw, o))?)
}

/// `B x C x H x W` -> `C x (B H W)`.
fn channels_first(x: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    Ok(x.reshape((b, c, h * w))?
        .transpose(0, 1)?
        .contiguous()?
        .reshape((c, b * h * w))?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};
    use candle_nn::{Conv2d, Conv2dConfig, ConvTranspose2d, ConvTranspose2dConfig, Module};

    fn randn(shape: &[usize]) -> Tensor {
        Tensor::randn(0f64, 1.0, shape, &Device::Cpu).unwrap()
    }

    fn max_diff(a: &Tensor, b: &Tensor) -> f64 {
        (a - b).unwrap().abs().unwrap().flatten_all().unwrap().max(0).unwrap().to_scalar::<f64>().unwrap()
    }

    #[test]
    fn same_conv_matches_reference() {
        for k in [1, 3] {
            let x = randn(&[2, 3, 5, 6]);
            let wt = randn(&[4, 3, k, k]);
            let cfg = Conv2dConfig {
                padding: k / 2,
                ..Default::default()
            };
            let reference = Conv2d::new(wt.clone(), None, cfg).forward(&x).unwrap();
            assert!(max_diff(&conv2d_same(&x, &wt).unwrap(), &reference) < 1e-10);
        }
    }

    #[test]
    fn transpose_conv_matches_reference() {
        let x = randn(&[2, 3, 4, 5]);
        let wt = randn(&[3, 4, 2, 2]);
        let b = randn(&[4]);
        let cfg = ConvTranspose2dConfig {
            stride: 2,
            ..Default::default()
        };
        let reference = ConvTranspose2d::new(wt.clone(), Some(b.clone()), cfg).forward(&x).unwrap();
        let ours = conv_transpose_2x2(&x, &wt, Some(&b)).unwrap();
        assert_eq!(ours.dims(), &[2, 4, 8, 10]);
        assert!(max_diff(&ours, &reference) < 1e-10);
    }

    #[test]
    fn patch_embed_matches_strided_conv() {
        let x = randn(&[2, 3, 8, 12]);
        let wt = randn(&[5, 3, 4, 4]);
        let b = randn(&[5]);
        let cfg = Conv2dConfig {
            stride: 4,
            ..Default::default()
        };
        let reference = Conv2d::new(wt.clone(), Some(b.clone()), cfg)
            .forward(&x)
            .unwrap()
            .flatten_from(2)
            .unwrap()
            .transpose(1, 2)
            .unwrap();
        let ours = patch_embed(&x, &wt, &b, 4).unwrap();
        assert!(max_diff(&ours, &reference) < 1e-10);
        assert_eq!(ours.dtype(), DType::F64);
    }
}
