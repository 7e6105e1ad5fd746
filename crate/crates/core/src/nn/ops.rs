//! Elementwise and resampling ops with cheap backward passes.

use candle_core::{CpuStorage, CustomOp1, CustomOp2, CustomOp3, Layout, Shape, Tensor, D};

use crate::error::{Error, Result};

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_C: f64 = 0.044_715;

// f32 uses 0.5 (1 + tanh u) = sigmoid(2u), which is cheaper than tanhf.
fn gelu_f32(x: f32) -> f32 {
    let u = SQRT_2_OVER_PI as f32 * (x + GELU_C as f32 * x * x * x);
    x / (1.0 + (-2.0 * u).exp())
}

fn gelu_grad_f32(x: f32) -> f32 {
    let c = SQRT_2_OVER_PI as f32;
    let s = 1.0 / (1.0 + (-2.0 * c * (x + GELU_C as f32 * x * x * x)).exp());
    s + 2.0 * x * s * (1.0 - s) * c * (1.0 + 3.0 * GELU_C as f32 * x * x)
}

fn gelu_f64(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + GELU_C * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

fn gelu_grad_f64(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + GELU_C * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_C * x * x)
}

fn map_storage(
    s: &CpuStorage,
    l: &Layout,
    f32_fn: fn(f32) -> f32,
    f64_fn: fn(f64) -> f64,
) -> candle_core::Result<(CpuStorage, Shape)> {
    let Some((start, end)) = l.contiguous_offsets() else {
        candle_core::bail!("elementwise op expects a contiguous input");
    };
    let out = match s {
        CpuStorage::F32(v) => CpuStorage::F32(v[start..end].iter().map(|&x| f32_fn(x)).collect()),
        CpuStorage::F64(v) => CpuStorage::F64(v[start..end].iter().map(|&x| f64_fn(x)).collect()),
        _ => candle_core::bail!("elementwise op supports f32 and f64 only"),
    };
    Ok((out, l.shape().clone()))
}

struct GeluGrad;

impl CustomOp1 for GeluGrad {
    fn name(&self) -> &'static str {
        "gelu-tanh-grad"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        map_storage(s, l, gelu_grad_f32, gelu_grad_f64)
    }
}

struct Gelu;

impl CustomOp1 for Gelu {
    fn name(&self) -> &'static str {
        "gelu-tanh"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        map_storage(s, l, gelu_f32, gelu_f64)
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad_res: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let d = arg.contiguous()?.apply_op1_no_bwd(&GeluGrad)?;
        Ok(Some(grad_res.mul(&d)?))
    }
}

/// Tanh-approximated GELU (same function as `Tensor::gelu`) with a closed-form derivative.
pub fn gelu(x: &Tensor) -> Result<Tensor> {
    Ok(x.contiguous()?.apply_op1(Gelu)?)
}

/// Unfolds `B x C x H x W` into `(C k k) x (B H W)` columns for a stride-1 "same"
/// convolution with an odd kernel `k`; row `c k^2 + dy k + dx`, column `b H W + y W + x`.
struct Im2Col {
    k: usize,
}

/// Adjoint of [`Im2Col`]: folds columns back, summing overlapping taps.
struct Col2Im {
    k: usize,
    c: usize,
    h: usize,
    w: usize,
}

fn im2col_loop<T: Copy + Default>(src: &[T], b: usize, c: usize, h: usize, w: usize, k: usize) -> Vec<T> {
    let p = k / 2;
    let hw = h * w;
    let mut out = vec![T::default(); b * c * k * k * hw];
    for bi in 0..b {
        for ci in 0..c {
            let plane = &src[(bi * c + ci) * hw..(bi * c + ci + 1) * hw];
            for dy in 0..k {
                for dx in 0..k {
                    let row = ((ci * k * k + dy * k + dx) * b + bi) * hw;
                    let dst = &mut out[row..row + hw];
                    for y in 0..h {
                        let sy = y as isize + dy as isize - p as isize;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        let sy = sy as usize;
                        for x in 0..w {
                            let sx = x as isize + dx as isize - p as isize;
                            if sx >= 0 && sx < w as isize {
                                dst[y * w + x] = plane[sy * w + sx as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

fn col2im_loop<T: Copy + Default + std::ops::AddAssign>(src: &[T], b: usize, c: usize, h: usize, w: usize, k: usize) -> Vec<T> {
    let p = k / 2;
    let hw = h * w;
    let mut out = vec![T::default(); b * c * hw];
    for bi in 0..b {
        for ci in 0..c {
            let plane = &mut out[(bi * c + ci) * hw..(bi * c + ci + 1) * hw];
            for dy in 0..k {
                for dx in 0..k {
                    let row = ((ci * k * k + dy * k + dx) * b + bi) * hw;
                    let col = &src[row..row + hw];
                    for y in 0..h {
                        let sy = y as isize + dy as isize - p as isize;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        let sy = sy as usize;
                        for x in 0..w {
                            let sx = x as isize + dx as isize - p as isize;
                            if sx >= 0 && sx < w as isize {
                                plane[sy * w + sx as usize] += col[y * w + x];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

impl CustomOp1 for Im2Col {
    fn name(&self) -> &'static str {
        "im2col"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (b, c, h, w) = l.shape().dims4()?;
        let Some((start, end)) = l.contiguous_offsets() else {
            candle_core::bail!("im2col expects a contiguous input");
        };
        let k = self.k;
        let out = match s {
            CpuStorage::F32(v) => CpuStorage::F32(im2col_loop(&v[start..end], b, c, h, w, k)),
            CpuStorage::F64(v) => CpuStorage::F64(im2col_loop(&v[start..end], b, c, h, w, k)),
            _ => candle_core::bail!("im2col supports f32 and f64 only"),
        };
        Ok((out, Shape::from((c * k * k, b * h * w))))
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad_res: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let (_, c, h, w) = arg.dims4()?;
        let op = Col2Im { k: self.k, c, h, w };
        Ok(Some(grad_res.contiguous()?.apply_op1_no_bwd(&op)?))
    }
}

impl CustomOp1 for Col2Im {
    fn name(&self) -> &'static str {
        "col2im"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (k, c, h, w) = (self.k, self.c, self.h, self.w);
        let b = l.shape().elem_count() / (c * k * k * h * w);
        let Some((start, end)) = l.contiguous_offsets() else {
            candle_core::bail!("col2im expects a contiguous input");
        };
        let out = match s {
            CpuStorage::F32(v) => CpuStorage::F32(col2im_loop(&v[start..end], b, c, h, w, k)),
            CpuStorage::F64(v) => CpuStorage::F64(col2im_loop(&v[start..end], b, c, h, w, k)),
            _ => candle_core::bail!("col2im supports f32 and f64 only"),
        };
        Ok((out, Shape::from((b, c, h, w))))
    }
}

/// Columns for a stride-1 "same" convolution with odd kernel `k`: `(C k k) x (B H W)`.
pub fn im2col(x: &Tensor, k: usize) -> Result<Tensor> {
    Ok(x.contiguous()?.apply_op1(Im2Col { k })?)
}

/// Nearest-neighbour 2x upsampling of `B x C x H x W`, written as a broadcast.
pub fn upsample2x(x: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    Ok(x.reshape((b, c, h, 1, w, 1))?
        .broadcast_as((b, c, h, 2, w, 2))?
        .contiguous()?
        .reshape((b, c, 2 * h, 2 * w))?)
}

/// Per-channel sums of `B x C x H x W` as `C`, via a matrix product.
pub fn channel_sums(x: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    let ones = Tensor::ones((h * w, 1), x.dtype(), x.device())?;
    let per_image = x.reshape((b, c, h * w))?.broadcast_matmul(&ones)?; // B x C x 1
    Ok(per_image.sum(0)?.squeeze(1)?)
}

/// Float element types the host kernels below are written for.
trait Elem: Copy + Default + Send + Sync + 'static {
    fn to_f64(self) -> f64;
    fn from_f64(v: f64) -> Self;
}

impl Elem for f32 {
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn from_f64(v: f64) -> Self {
        v as f32
    }
}

impl Elem for f64 {
    fn to_f64(self) -> f64 {
        self
    }
    fn from_f64(v: f64) -> Self {
        v
    }
}

fn contiguous_slice<'a, T>(v: &'a [T], l: &Layout, what: &str) -> candle_core::Result<&'a [T]> {
    match l.contiguous_offsets() {
        Some((start, end)) => Ok(&v[start..end]),
        None => candle_core::bail!("{what} expects contiguous inputs"),
    }
}

/// Runs a generic kernel over one, two or three same-typed CPU storages.
macro_rules! dispatch {
    ($what:expr, $f:ident, ($($s:ident, $l:ident),+) $(, $arg:expr)*) => {
        match ($($s,)+) {
            ($(CpuStorage::F32($s),)+) => {
                CpuStorage::F32($f($(contiguous_slice($s, $l, $what)?,)+ $($arg),*))
            }
            ($(CpuStorage::F64($s),)+) => {
                CpuStorage::F64($f($(contiguous_slice($s, $l, $what)?,)+ $($arg),*))
            }
            _ => candle_core::bail!("{} supports matching f32 or f64 inputs only", $what),
        }
    };
}

/// `x` viewed as `outer x n x inner` plus `b` (`n` values) along the middle axis.
struct BiasAdd {
    n: usize,
    inner: usize,
}

fn bias_add_kernel<T: Elem>(x: &[T], b: &[T], n: usize, inner: usize) -> Vec<T> {
    let mut out = x.to_vec();
    for chunk in out.chunks_mut(n * inner) {
        for (j, &bj) in b.iter().enumerate() {
            for v in &mut chunk[j * inner..(j + 1) * inner] {
                *v = T::from_f64(v.to_f64() + bj.to_f64());
            }
        }
    }
    out
}

fn bias_grad_kernel<T: Elem>(g: &[T], n: usize, inner: usize) -> Vec<T> {
    let mut acc = vec![0f64; n];
    for chunk in g.chunks(n * inner) {
        for (j, a) in acc.iter_mut().enumerate() {
            *a += chunk[j * inner..(j + 1) * inner].iter().map(|v| v.to_f64()).sum::<f64>();
        }
    }
    acc.into_iter().map(T::from_f64).collect()
}

struct BiasGrad {
    n: usize,
    inner: usize,
}

impl CustomOp1 for BiasGrad {
    fn name(&self) -> &'static str {
        "bias-grad"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (n, inner) = (self.n, self.inner);
        Ok((dispatch!("bias-grad", bias_grad_kernel, (s, l), n, inner), Shape::from(n)))
    }
}

impl CustomOp2 for BiasAdd {
    fn name(&self) -> &'static str {
        "bias-add"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (n, inner) = (self.n, self.inner);
        Ok((dispatch!("bias-add", bias_add_kernel, (s1, l1, s2, l2), n, inner), l1.shape().clone()))
    }

    fn bwd(&self, _x: &Tensor, b: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<(Option<Tensor>, Option<Tensor>)> {
        let op = BiasGrad {
            n: self.n,
            inner: self.inner,
        };
        let gb = grad.contiguous()?.apply_op1_no_bwd(&op)?.reshape(b.shape())?;
        Ok((Some(grad.clone()), Some(gb)))
    }
}

/// Adds `b` to `x` broadcasting over every axis outside `axis..axis + b.rank()`, where
/// `b.dims()` must equal that slice of `x.dims()`. The bias gradient is a direct sum
/// instead of a strided reduction.
pub fn add_bias(x: &Tensor, b: &Tensor, axis: usize) -> Result<Tensor> {
    let dims = x.dims();
    let end = axis + b.rank();
    if end > dims.len() || &dims[axis..end] != b.dims() {
        return Err(Error::ShapeMismatch {
            expected: dims.get(axis..end.min(dims.len())).unwrap_or_default().to_vec(),
            actual: b.dims().to_vec(),
        });
    }
    let op = BiasAdd {
        n: b.elem_count(),
        inner: dims[end..].iter().product(),
    };
    Ok(x.contiguous()?.apply_op2(&b.contiguous()?, op)?)
}

/// Affine normalization of `x` viewed as `outer x n x inner`, with weight and bias of
/// length `n`. With `per_row` the statistics are taken over the `n` axis at every
/// `(outer, inner)` position (layer norm); otherwise over `outer` and `inner` for every
/// middle index (batch norm).
#[derive(Clone, Copy)]
struct Norm {
    per_row: bool,
    outer: usize,
    n: usize,
    inner: usize,
    eps: f64,
}

impl Norm {
    fn groups(&self) -> usize {
        if self.per_row {
            self.outer * self.inner
        } else {
            self.n
        }
    }

    fn group_len(&self) -> usize {
        if self.per_row {
            self.n
        } else {
            self.outer * self.inner
        }
    }

    /// Flat index of the `k`-th element of group `g` and its affine channel.
    #[inline]
    fn index(&self, g: usize, k: usize) -> (usize, usize) {
        if self.per_row {
            let (o, i) = (g / self.inner, g % self.inner);
            ((o * self.n + k) * self.inner + i, k)
        } else {
            let (o, i) = (k / self.inner, k % self.inner);
            ((o * self.n + g) * self.inner + i, g)
        }
    }

    fn stats<T: Elem>(&self, x: &[T]) -> Vec<(f64, f64)> {
        let len = self.group_len() as f64;
        (0..self.groups())
            .map(|g| {
                let mut mean = 0.0;
                for k in 0..self.group_len() {
                    mean += x[self.index(g, k).0].to_f64();
                }
                mean /= len;
                let mut var = 0.0;
                for k in 0..self.group_len() {
                    let d = x[self.index(g, k).0].to_f64() - mean;
                    var += d * d;
                }
                (mean, var / len)
            })
            .collect()
    }
}

fn norm_fwd_kernel<T: Elem>(x: &[T], w: &[T], b: &[T], norm: Norm) -> Vec<T> {
    let mut out = vec![T::default(); x.len()];
    for (g, (mean, var)) in norm.stats(x).into_iter().enumerate() {
        let rstd = 1.0 / (var + norm.eps).sqrt();
        for k in 0..norm.group_len() {
            let (i, c) = norm.index(g, k);
            let xhat = (x[i].to_f64() - mean) * rstd;
            out[i] = T::from_f64(xhat * w[c].to_f64() + b[c].to_f64());
        }
    }
    out
}

/// Packs `[dx | dw | db]`.
fn norm_bwd_kernel<T: Elem>(x: &[T], w: &[T], g: &[T], norm: Norm) -> Vec<T> {
    let nw = w.len();
    let mut dx = vec![0f64; x.len()];
    let mut dw = vec![0f64; nw];
    let mut db = vec![0f64; nw];
    let len = norm.group_len() as f64;
    for (grp, (mean, var)) in norm.stats(x).into_iter().enumerate() {
        let rstd = 1.0 / (var + norm.eps).sqrt();
        let (mut sum_dh, mut sum_dh_xhat) = (0.0, 0.0);
        for k in 0..norm.group_len() {
            let (i, c) = norm.index(grp, k);
            let xhat = (x[i].to_f64() - mean) * rstd;
            let gi = g[i].to_f64();
            dw[c] += gi * xhat;
            db[c] += gi;
            let dh = gi * w[c].to_f64();
            sum_dh += dh;
            sum_dh_xhat += dh * xhat;
        }
        for k in 0..norm.group_len() {
            let (i, c) = norm.index(grp, k);
            let xhat = (x[i].to_f64() - mean) * rstd;
            let dh = g[i].to_f64() * w[c].to_f64();
            dx[i] = rstd * (dh - sum_dh / len - xhat * sum_dh_xhat / len);
        }
    }
    dx.into_iter().chain(dw).chain(db).map(T::from_f64).collect()
}

impl CustomOp3 for Norm {
    fn name(&self) -> &'static str {
        "norm"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
        s3: &CpuStorage,
        l3: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let norm = *self;
        Ok((dispatch!("norm", norm_fwd_kernel, (s1, l1, s2, l2, s3, l3), norm), l1.shape().clone()))
    }

    fn bwd(
        &self,
        x: &Tensor,
        w: &Tensor,
        _b: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>, Option<Tensor>)> {
        let packed = x.apply_op3_no_bwd(w, &grad.contiguous()?, &NormBwd(*self))?;
        let (nx, nw) = (x.elem_count(), w.elem_count());
        let dx = packed.narrow(0, 0, nx)?.reshape(x.shape())?;
        let dw = packed.narrow(0, nx, nw)?.reshape(w.shape())?;
        let db = packed.narrow(0, nx + nw, nw)?.reshape(w.shape())?;
        Ok((Some(dx), Some(dw), Some(db)))
    }
}

struct NormBwd(Norm);

impl CustomOp3 for NormBwd {
    fn name(&self) -> &'static str {
        "norm-bwd"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
        s3: &CpuStorage,
        l3: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let norm = self.0;
        let n = l1.shape().elem_count() + 2 * l2.shape().elem_count();
        Ok((dispatch!("norm-bwd", norm_bwd_kernel, (s1, l1, s2, l2, s3, l3), norm), Shape::from(n)))
    }
}

/// Layer normalization over the last axis with affine `weight`, `bias` (both `[D]`).
pub fn layer_norm(x: &Tensor, weight: &Tensor, bias: &Tensor, eps: f64) -> Result<Tensor> {
    let d = x.dim(D::Minus1)?;
    let norm = Norm {
        per_row: true,
        outer: x.elem_count() / d.max(1),
        n: d,
        inner: 1,
        eps,
    };
    Ok(x.contiguous()?.apply_op3(weight, bias, norm)?)
}

/// Training-mode batch normalization of `B x C x H x W` with batch statistics (biased
/// variance) and per-channel affine `weight`, `bias`.
pub fn batch_norm(x: &Tensor, weight: &Tensor, bias: &Tensor, eps: f64) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    let norm = Norm {
        per_row: false,
        outer: b,
        n: c,
        inner: h * w,
        eps,
    };
    Ok(x.contiguous()?.apply_op3(weight, bias, norm)?)
}

struct SoftmaxLast;

fn softmax_kernel<T: Elem>(x: &[T], d: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks(d) {
        let max = row.iter().map(|v| v.to_f64()).fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = row.iter().map(|v| (v.to_f64() - max).exp()).collect();
        let s: f64 = e.iter().sum();
        out.extend(e.into_iter().map(|v| T::from_f64(v / s)));
    }
    out
}

fn softmax_grad_kernel<T: Elem>(y: &[T], g: &[T], d: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(y.len());
    for (yr, gr) in y.chunks(d).zip(g.chunks(d)) {
        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a.to_f64() * b.to_f64()).sum();
        out.extend(yr.iter().zip(gr).map(|(a, b)| T::from_f64(a.to_f64() * (b.to_f64() - dot))));
    }
    out
}

struct SoftmaxGrad;

impl CustomOp2 for SoftmaxGrad {
    fn name(&self) -> &'static str {
        "softmax-grad"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let d = l1.shape().dims().last().copied().unwrap_or(1);
        Ok((dispatch!("softmax-grad", softmax_grad_kernel, (s1, l1, s2, l2), d), l1.shape().clone()))
    }
}

impl CustomOp1 for SoftmaxLast {
    fn name(&self) -> &'static str {
        "softmax-last"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let d = l.shape().dims().last().copied().unwrap_or(1);
        Ok((dispatch!("softmax", softmax_kernel, (s, l), d), l.shape().clone()))
    }

    fn bwd(&self, _arg: &Tensor, res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(res.apply_op2_no_bwd(&grad.contiguous()?, &SoftmaxGrad)?))
    }
}

/// Softmax over the last axis.
pub fn softmax_last_dim(x: &Tensor) -> Result<Tensor> {
    Ok(x.contiguous()?.apply_op1(SoftmaxLast)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{Device, Var};

    #[test]
    fn gelu_matches_builtin_and_gradient() {
        let x = Var::new(&[-3.0f64, -0.5, 0.0, 0.7, 2.5], &Device::Cpu).unwrap();
        let ours = gelu(x.as_tensor()).unwrap();
        let builtin = x.as_tensor().gelu().unwrap();
        let d: f64 = (&ours - &builtin).unwrap().abs().unwrap().sum_all().unwrap().to_scalar().unwrap();
        assert!(d < 1e-12);
        let g_ours = ours.sum_all().unwrap().backward().unwrap();
        let g_ref = builtin.sum_all().unwrap().backward().unwrap();
        let a = g_ours.get(x.as_tensor()).unwrap();
        let b = g_ref.get(x.as_tensor()).unwrap();
        let d: f64 = (a - b).unwrap().abs().unwrap().sum_all().unwrap().to_scalar().unwrap();
        assert!(d < 1e-6, "gradient gap {d}");
        // Central differences on our own forward.
        let xs: Vec<f64> = x.as_tensor().to_vec1().unwrap();
        let an: Vec<f64> = a.to_vec1().unwrap();
        for (xi, gi) in xs.iter().zip(an) {
            let fd = (gelu_f64(xi + 1e-6) - gelu_f64(xi - 1e-6)) / 2e-6;
            assert!((fd - gi).abs() < 1e-8);
        }
    }

    #[test]
    fn gelu_f32_agrees_with_f64() {
        for i in -60..=60 {
            let x = i as f64 / 10.0;
            assert!((gelu_f32(x as f32) as f64 - gelu_f64(x)).abs() < 1e-5);
            assert!((gelu_grad_f32(x as f32) as f64 - gelu_grad_f64(x)).abs() < 1e-5);
        }
    }

    #[test]
    fn im2col_gradient_is_adjoint() {
        // <im2col(x), y> = <x, col2im(y)> checked through autodiff.
        let x = Var::randn(0f64, 1.0, (2, 3, 4, 5), &Device::Cpu).unwrap();
        let y = Tensor::randn(0f64, 1.0, (27, 40), &Device::Cpu).unwrap();
        let cols = im2col(x.as_tensor(), 3).unwrap();
        let dot = cols.mul(&y).unwrap().sum_all().unwrap();
        let g = dot.backward().unwrap();
        let gx = g.get(x.as_tensor()).unwrap();
        let lhs: f64 = dot.to_scalar().unwrap();
        let rhs: f64 = gx.mul(x.as_tensor()).unwrap().sum_all().unwrap().to_scalar().unwrap();
        assert!((lhs - rhs).abs() < 1e-9);
    }

    #[test]
    fn upsample_matches_builtin() {
        let x = Tensor::arange(0f32, 24.0, &Device::Cpu).unwrap().reshape((1, 2, 3, 4)).unwrap();
        let a = upsample2x(&x).unwrap();
        let b = x.upsample_nearest2d(6, 8).unwrap();
        assert_eq!(a.flatten_all().unwrap().to_vec1::<f32>().unwrap(), b.flatten_all().unwrap().to_vec1::<f32>().unwrap());
    }

    #[test]
    fn channel_sums_match() {
        let x = Tensor::arange(0f64, 48.0, &Device::Cpu).unwrap().reshape((2, 3, 2, 4)).unwrap();
        let a: Vec<f64> = channel_sums(&x).unwrap().to_vec1().unwrap();
        let b: Vec<f64> = x.sum_keepdim((0, 2, 3)).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        assert_eq!(a, b);
    }

    fn vars(shapes: &[&[usize]]) -> Vec<Var> {
        shapes
            .iter()
            .map(|s| Var::randn(0f64, 1.0, *s, &Device::Cpu).unwrap())
            .collect()
    }

    /// Compares values and gradients (under a random linear functional) of two graphs.
    fn assert_same(vs: &[Var], ours: Tensor, reference: Tensor) {
        let probe = Tensor::randn(0f64, 1.0, ours.shape(), &Device::Cpu).unwrap();
        let gap = |a: &Tensor, b: &Tensor| -> f64 {
            (a - b).unwrap().abs().unwrap().max_all().unwrap().to_scalar().unwrap()
        };
        assert!(gap(&ours, &reference) < 1e-10);
        let g1 = ours.mul(&probe).unwrap().sum_all().unwrap().backward().unwrap();
        let g2 = reference.mul(&probe).unwrap().sum_all().unwrap().backward().unwrap();
        for v in vs {
            let (a, b) = (g1.get(v.as_tensor()).unwrap(), g2.get(v.as_tensor()).unwrap());
            assert!(gap(a, b) < 1e-9, "gradient gap {}", gap(a, b));
        }
    }

    #[test]
    fn bias_add_matches_broadcast() {
        let vs = vars(&[&[2, 3, 4, 5], &[3, 4]]);
        let ours = add_bias(vs[0].as_tensor(), vs[1].as_tensor(), 1).unwrap();
        let reference = vs[0].as_tensor().broadcast_add(&vs[1].as_tensor().reshape((1, 3, 4, 1)).unwrap()).unwrap();
        assert_same(&vs, ours, reference);
        assert!(add_bias(vs[0].as_tensor(), vs[1].as_tensor(), 2).is_err());
    }

    #[test]
    fn layer_norm_matches_primitives() {
        let vs = vars(&[&[2, 3, 8], &[8], &[8]]);
        let (x, w, b) = (vs[0].as_tensor(), vs[1].as_tensor(), vs[2].as_tensor());
        let mean = (x.sum_keepdim(D::Minus1).unwrap() / 8.0).unwrap();
        let c = x.broadcast_sub(&mean).unwrap();
        let var = (c.sqr().unwrap().sum_keepdim(D::Minus1).unwrap() / 8.0).unwrap();
        let reference = c
            .broadcast_div(&(var + 1e-5).unwrap().sqrt().unwrap())
            .unwrap()
            .broadcast_mul(w)
            .unwrap()
            .broadcast_add(b)
            .unwrap();
        assert_same(&vs, layer_norm(x, w, b, 1e-5).unwrap(), reference);
    }

    #[test]
    fn batch_norm_matches_primitives() {
        let vs = vars(&[&[3, 4, 2, 5], &[4], &[4]]);
        let (x, w, b) = (vs[0].as_tensor(), vs[1].as_tensor(), vs[2].as_tensor());
        let n = 30.0;
        let mean = (x.sum_keepdim((0, 2, 3)).unwrap() / n).unwrap();
        let c = x.broadcast_sub(&mean).unwrap();
        let var = (c.sqr().unwrap().sum_keepdim((0, 2, 3)).unwrap() / n).unwrap();
        let reference = c
            .broadcast_div(&(var + 1e-5).unwrap().sqrt().unwrap())
            .unwrap()
            .broadcast_mul(&w.reshape((1, 4, 1, 1)).unwrap())
            .unwrap()
            .broadcast_add(&b.reshape((1, 4, 1, 1)).unwrap())
            .unwrap();
        assert_same(&vs, batch_norm(x, w, b, 1e-5).unwrap(), reference);
    }

    #[test]
    fn softmax_matches_builtin() {
        let vs = vars(&[&[2, 3, 7]]);
        let x = vs[0].as_tensor();
        let reference = candle_nn::ops::softmax(x, D::Minus1).unwrap();
        assert_same(&vs, softmax_last_dim(x).unwrap(), reference);
    }
}
