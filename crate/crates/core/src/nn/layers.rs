use candle_core::{Tensor, Var, D};

use super::conv::conv2d_same;
use super::ops::{add_bias, batch_norm, channel_sums, gelu};
use super::{Init, MultiHeadAttention, ParamPath};
use crate::error::Result;

const LN_EPS: f64 = 1e-5;
const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.1;

/// Layer normalization over the last axis.
pub fn layer_norm(x: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    super::ops::layer_norm(x, weight, bias, LN_EPS)
}

/// `y = x W^T + b` over the last axis; leading axes are folded into one matrix product.
#[derive(Debug, Clone)]
pub struct Linear {
    weight: Tensor,
    bias: Option<Tensor>,
}

impl Linear {
    /// `weight: out x in`, `bias: out`.
    pub fn new(weight: Tensor, bias: Option<Tensor>) -> Self {
        Self { weight, bias }
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    pub fn bias(&self) -> Option<&Tensor> {
        self.bias.as_ref()
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut dims = x.dims().to_vec();
        let din = x.dim(D::Minus1)?;
        let rows = x.elem_count() / din.max(1);
        let mut y = x.reshape((rows, din))?.matmul(&self.weight.t()?)?;
        if let Some(b) = &self.bias {
            y = add_bias(&y, b, 1)?;
        }
        *dims.last_mut().expect("linear input has an axis") = self.weight.dim(0)?;
        Ok(y.reshape(dims)?)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    weight: Tensor,
    bias: Tensor,
}

impl LayerNorm {
    pub fn new(p: &mut ParamPath, dim: usize) -> Result<Self> {
        Ok(Self {
            weight: p.param("weight", &[dim], Init::Ones)?,
            bias: p.param("bias", &[dim], Init::Zeros)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        layer_norm(x, &self.weight, &self.bias)
    }
}

/// Stack of linear layers with ReLU between them (none after the last).
#[derive(Debug, Clone)]
pub struct Mlp {
    layers: Vec<Linear>,
}

impl Mlp {
    /// `dims = [in, hidden.., out]`.
    pub fn new(p: &mut ParamPath, dims: &[usize]) -> Result<Self> {
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| p.linear(w[0], w[1], &format!("layers.{i}")))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { layers })
    }

    /// Like [`Mlp::new`] but the final layer starts at zero.
    pub fn new_zero_last(p: &mut ParamPath, dims: &[usize]) -> Result<Self> {
        let n = dims.len() - 1;
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let name = format!("layers.{i}");
                if i + 1 == n {
                    p.linear_zeros(w[0], w[1], &name)
                } else {
                    p.linear(w[0], w[1], &name)
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { layers })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        for (i, l) in self.layers.iter().enumerate() {
            h = l.forward(&h)?;
            if i + 1 < self.layers.len() {
                h = h.relu()?;
            }
        }
        Ok(h)
    }

    pub fn layers(&self) -> &[Linear] {
        &self.layers
    }
}

/// Batch normalization over `(B, H, W)` of an NCHW tensor.
///
/// Training mode normalizes with batch statistics and updates the running averages; eval
/// mode uses the frozen running averages.
#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    weight: Tensor,
    bias: Tensor,
    running_mean: Var,
    running_var: Var,
}

impl BatchNorm2d {
    pub fn new(p: &mut ParamPath, channels: usize) -> Result<Self> {
        Ok(Self {
            weight: p.param("weight", &[channels], Init::Ones)?,
            bias: p.param("bias", &[channels], Init::Zeros)?,
            running_mean: p.buffer("running_mean", &[channels], Init::Zeros)?,
            running_var: p.buffer("running_var", &[channels], Init::Ones)?,
        })
    }

    pub fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        if train {
            let n = (b * h * w) as f64;
            let xd = x.detach();
            let mean = (channel_sums(&xd)? / n)?;
            let centered = xd.broadcast_sub(&mean.reshape((1, c, 1, 1))?)?;
            let var = (channel_sums(&centered.sqr()?)? / n)?;
            let unbiased = if n > 1.0 { n / (n - 1.0) } else { 1.0 };
            let rm = ((self.running_mean.as_tensor() * (1.0 - BN_MOMENTUM))? + (mean * BN_MOMENTUM)?)?;
            let rv = ((self.running_var.as_tensor() * (1.0 - BN_MOMENTUM))? + (var * (BN_MOMENTUM * unbiased))?)?;
            self.running_mean.set(&rm)?;
            self.running_var.set(&rv)?;
            return batch_norm(x, &self.weight, &self.bias, BN_EPS);
        }
        let mean = self.running_mean.as_tensor().reshape((1, c, 1, 1))?;
        let var = self.running_var.as_tensor().reshape((1, c, 1, 1))?;
        let normed = x.broadcast_sub(&mean)?.broadcast_div(&(var + BN_EPS)?.sqrt()?)?;
        Ok(normed
            .broadcast_mul(&self.weight.reshape((1, c, 1, 1))?)?
            .broadcast_add(&self.bias.reshape((1, c, 1, 1))?)?)
    }
}

/// Convolution, batch normalization, ReLU.
#[derive(Debug, Clone)]
pub struct ConvModule {
    weight: Tensor,
    bn: BatchNorm2d,
}

impl ConvModule {
    pub fn new(p: &mut ParamPath, in_ch: usize, out_ch: usize, kernel: usize) -> Result<Self> {
        let fan_in = in_ch * kernel * kernel;
        let weight = p
            .pp("conv")
            .param("weight", &[out_ch, in_ch, kernel, kernel], Init::fan_in(fan_in))?;
        Ok(Self {
            weight,
            bn: BatchNorm2d::new(&mut p.pp("bn"), out_ch)?,
        })
    }

    pub fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let h = conv2d_same(x, &self.weight)?;
        Ok(self.bn.forward(&h, train)?.relu()?)
    }
}

/// Pre-norm transformer encoder block: self-attention and a GELU feed-forward, each residual.
#[derive(Debug, Clone)]
pub struct TransformerBlock {
    ln1: LayerNorm,
    attn: MultiHeadAttention,
    ln2: LayerNorm,
    ff: Mlp,
}

impl TransformerBlock {
    pub fn new(p: &mut ParamPath, dim: usize, heads: usize) -> Result<Self> {
        Ok(Self {
            ln1: LayerNorm::new(&mut p.pp("ln1"), dim)?,
            attn: MultiHeadAttention::new(&mut p.pp("attn"), dim, heads)?,
            ln2: LayerNorm::new(&mut p.pp("ln2"), dim)?,
            ff: Mlp::new(&mut p.pp("ff"), &[dim, 4 * dim, dim])?,
        })
    }

    pub fn forward(&self, x: &Tensor, key_bias: Option<&Tensor>) -> Result<Tensor> {
        let h = self.ln1.forward(x)?;
        let x = (x + self.attn.forward(&h, &h, key_bias)?)?;
        let h = self.ln2.forward(&x)?;
        let [l1, l2] = self.ff.layers() else {
            unreachable!("feed-forward has two layers")
        };
        let h = l2.forward(&gelu(&l1.forward(&h)?)?)?;
        Ok((x + h)?)
    }
}
