use candle_core::Tensor;

use super::ops::softmax_last_dim;
use super::{LayerNorm, Linear, ParamPath};
use crate::error::{Error, Result};

/// Scaled dot-product multi-head attention with separate query/key/value/output maps.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
    heads: usize,
}

impl MultiHeadAttention {
    pub fn new(p: &mut ParamPath, dim: usize, heads: usize) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::Config(format!(
                "width {dim} is not divisible by {heads} heads"
            )));
        }
        Ok(Self {
            q: p.linear(dim, dim, "q")?,
            k: p.linear(dim, dim, "k")?,
            v: p.linear(dim, dim, "v")?,
            out: p.linear(dim, dim, "out")?,
            heads,
        })
    }

    /// `query: B x Nq x D`, `kv: B x Nk x D`, optional additive key bias `B x 1 x 1 x Nk`.
    pub fn forward(&self, query: &Tensor, kv: &Tensor, key_bias: Option<&Tensor>) -> Result<Tensor> {
        let (b, nq, d) = query.dims3()?;
        let nk = kv.dim(1)?;
        let dh = d / self.heads;
        let split = |t: Tensor, n: usize| -> Result<Tensor> {
            Ok(t.reshape((b, n, self.heads, dh))?
                .transpose(1, 2)?
                .contiguous()?)
        };
        let q = split(self.q.forward(query)?, nq)?;
        let k = split(self.k.forward(kv)?, nk)?;
        let v = split(self.v.forward(kv)?, nk)?;
        let mut scores = (q.matmul(&k.t()?.contiguous()?)? / (dh as f64).sqrt())?;
        if let Some(bias) = key_bias {
            scores = scores.broadcast_add(bias)?;
        }
        let attn = softmax_last_dim(&scores)?;
        let ctx = attn
            .matmul(&v)?
            .transpose(1, 2)?
            .contiguous()?
            .reshape((b, nq, d))?;
        Ok(self.out.forward(&ctx)?)
    }

    pub fn out_proj(&self) -> &Linear {
        &self.out
    }
}

/// Residual cross-attention: `query + Attn(LN(query), LN(kv))`.
#[derive(Debug, Clone)]
pub struct CrossAttention {
    ln_q: LayerNorm,
    ln_kv: LayerNorm,
    attn: MultiHeadAttention,
}

impl CrossAttention {
    pub fn new(p: &mut ParamPath, dim: usize, heads: usize) -> Result<Self> {
        Ok(Self {
            ln_q: LayerNorm::new(&mut p.pp("ln_q"), dim)?,
            ln_kv: LayerNorm::new(&mut p.pp("ln_kv"), dim)?,
            attn: MultiHeadAttention::new(&mut p.pp("attn"), dim, heads)?,
        })
    }

    pub fn forward(&self, query: &Tensor, kv: &Tensor, key_bias: Option<&Tensor>) -> Result<Tensor> {
        let q = self.ln_q.forward(query)?;
        let kv = self.ln_kv.forward(kv)?;
        Ok((query + self.attn.forward(&q, &kv, key_bias)?)?)
    }

    pub fn attention(&self) -> &MultiHeadAttention {
        &self.attn
    }
}

/// Residual self-attention: `x + Attn(LN(x), LN(x))`.
#[derive(Debug, Clone)]
pub struct SelfAttention {
    ln: LayerNorm,
    attn: MultiHeadAttention,
}

impl SelfAttention {
    pub fn new(p: &mut ParamPath, dim: usize, heads: usize) -> Result<Self> {
        Ok(Self {
            ln: LayerNorm::new(&mut p.pp("ln"), dim)?,
            attn: MultiHeadAttention::new(&mut p.pp("attn"), dim, heads)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.ln.forward(x)?;
        Ok((x + self.attn.forward(&h, &h, None)?)?)
    }
}
