//! Parameter storage and the small set of layers the grounding model is assembled from.
//!
//! Parameters are created from a seeded ChaCha stream so that model initialization is a pure
//! function of `(structure, seed)`; candle's own random initializers draw from a thread RNG.

mod attention;
pub mod conv;
pub mod ops;
mod layers;
pub mod resample;

pub use attention::{CrossAttention, MultiHeadAttention, SelfAttention};
pub use layers::{layer_norm, BatchNorm2d, ConvModule, LayerNorm, Linear, Mlp, TransformerBlock};

use std::collections::HashMap;
use std::path::Path;

use candle_core::{DType, Device, Tensor, Var};
use candle_nn::VarMap;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Suffixes of non-trainable state tensors (normalization running statistics).
const BUFFER_SUFFIXES: [&str; 2] = [".running_mean", ".running_var"];

#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Ones,
    /// Uniform in `[-bound, bound]`.
    Uniform(f64),
    /// Normal with the given standard deviation.
    Normal(f64),
}

impl Init {
    /// PyTorch-style default for a layer with `fan_in` inputs.
    pub fn fan_in(fan_in: usize) -> Self {
        Init::Uniform(1.0 / (fan_in as f64).sqrt())
    }
}

/// Owns every parameter and buffer of a model.
pub struct ParamStore {
    varmap: VarMap,
    device: Device,
    dtype: DType,
    rng: ChaCha8Rng,
}

impl ParamStore {
    pub fn new(dtype: DType, seed: u64) -> Self {
        Self {
            varmap: VarMap::new(),
            device: Device::Cpu,
            dtype,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn root(&mut self) -> ParamPath<'_> {
        ParamPath {
            store: self,
            prefix: String::new(),
        }
    }

    fn create(&mut self, name: String, shape: &[usize], init: Init) -> Result<Var> {
        let n: usize = shape.iter().product();
        let values: Vec<f64> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Uniform(b) => (0..n)
                .map(|_| self.rng.random_range(-b..=b))
                .collect(),
            Init::Normal(std) => (0..n).map(|_| std * standard_normal(&mut self.rng)).collect(),
        };
        let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let mut data = self.varmap.data().lock().expect("param map poisoned");
        if data.insert(name.clone(), var.clone()).is_some() {
            return Err(Error::Config(format!("duplicate parameter name {name}")));
        }
        Ok(var)
    }

    /// Every tensor, trainable or not, keyed by name.
    pub fn named_vars(&self) -> Vec<(String, Var)> {
        let data = self.varmap.data().lock().expect("param map poisoned");
        let mut out: Vec<_> = data.iter().map(|(k, v)| (k.clone(), v.clone())).collect();
        out.sort_by(|a, b| a.0.cmp(&b.0));
        out
    }

    /// Trainable parameters sorted by name.
    pub fn trainable(&self) -> Vec<(String, Var)> {
        self.named_vars()
            .into_iter()
            .filter(|(k, _)| !is_buffer(k))
            .collect()
    }

    pub fn get(&self, name: &str) -> Option<Var> {
        self.varmap
            .data()
            .lock()
            .expect("param map poisoned")
            .get(name)
            .cloned()
    }

    pub fn num_parameters(&self) -> usize {
        self.trainable().iter().map(|(_, v)| v.elem_count()).sum()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.varmap.save(path)?;
        Ok(())
    }

    /// Overwrites every tensor in place with the values stored at `path`.
    pub fn load(&mut self, path: &Path) -> Result<()> {
        let stored = candle_core::safetensors::load(path, &self.device)?;
        self.load_tensors(&stored)
    }

    pub fn load_tensors(&mut self, stored: &HashMap<String, Tensor>) -> Result<()> {
        for (name, var) in self.named_vars() {
            let t = stored
                .get(&name)
                .ok_or_else(|| Error::Config(format!("checkpoint is missing tensor {name}")))?;
            if t.dims() != var.dims() {
                return Err(Error::ShapeMismatch {
                    expected: var.dims().to_vec(),
                    actual: t.dims().to_vec(),
                });
            }
            var.set(&t.to_dtype(self.dtype)?)?;
        }
        Ok(())
    }
}

pub fn is_buffer(name: &str) -> bool {
    BUFFER_SUFFIXES.iter().any(|s| name.ends_with(s))
}

fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller; u1 in (0, 1] keeps the log finite.
    let u1: f64 = 1.0 - rng.random::<f64>();
    let u2: f64 = rng.random::<f64>();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Hierarchical name scope into a [`ParamStore`].
pub struct ParamPath<'a> {
    store: &'a mut ParamStore,
    prefix: String,
}

impl ParamPath<'_> {
    pub fn pp(&mut self, name: &str) -> ParamPath<'_> {
        ParamPath {
            prefix: self.full(name),
            store: self.store,
        }
    }

    fn full(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    pub fn param(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        let full = self.full(name);
        Ok(self.store.create(full, shape, init)?.as_tensor().clone())
    }

    /// Non-trainable state; `name` must end with one of the buffer suffixes.
    pub fn buffer(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Var> {
        let full = self.full(name);
        debug_assert!(is_buffer(&full));
        self.store.create(full, shape, init)
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype
    }

    pub fn device(&self) -> Device {
        self.store.device.clone()
    }

    /// `out x in` weight with bias, PyTorch default init.
    pub fn linear(&mut self, in_dim: usize, out_dim: usize, name: &str) -> Result<Linear> {
        let mut p = self.pp(name);
        let w = p.param("weight", &[out_dim, in_dim], Init::fan_in(in_dim))?;
        let b = p.param("bias", &[out_dim], Init::fan_in(in_dim))?;
        Ok(Linear::new(w, Some(b)))
    }

    /// Linear layer whose weight and bias start at zero.
    pub fn linear_zeros(&mut self, in_dim: usize, out_dim: usize, name: &str) -> Result<Linear> {
        let mut p = self.pp(name);
        let w = p.param("weight", &[out_dim, in_dim], Init::Zeros)?;
        let b = p.param("bias", &[out_dim], Init::Zeros)?;
        Ok(Linear::new(w, Some(b)))
    }
}

/// Converts a `{0,1}` validity mask (`B x N`) into an additive attention bias
/// (`B x 1 x 1 x N`) with a large negative value at padded keys.
pub fn key_padding_bias(mask: &Tensor) -> Result<Tensor> {
    let (b, n) = mask.dims2()?;
    let bias = ((mask - 1.0)? * 1e9)?;
    Ok(bias.reshape((b, 1, 1, n))?)
}
