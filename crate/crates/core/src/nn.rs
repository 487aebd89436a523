//! Minimal layer plumbing on top of candle tensors: a named, seeded parameter
//! store, convolution/linear layers, and the weight container format.
//!
//! Weight containers are safetensors files. The header carries one metadata
//! key, `tamp`, whose value is a JSON object with at least
//! `{"format": <kind>, "format_version": 1}` plus kind-specific fields.
//! Parameter names are dotted paths such as `indite.enc.0.weight`.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{DType, Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

use crate::error::{Error, Result};

pub const CONTAINER_VERSION: u64 = 1;

pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    dtype: DType,
    rng: ChaCha8Rng,
}

impl ParamStore {
    pub fn new(dtype: DType, seed: u64) -> Self {
        Self { vars: BTreeMap::new(), dtype, rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    fn uniform(&mut self, name: &str, shape: &[usize], bound: f64) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let values: Vec<f64> = (0..n)
            .map(|_| if bound > 0.0 { self.rng.random_range(-bound..bound) } else { 0.0 })
            .collect();
        let t = Tensor::from_vec(values, shape, &Device::Cpu)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        if self.vars.insert(name.to_string(), var).is_some() {
            return Err(Error::Config(format!("duplicate parameter {name}")));
        }
        Ok(out)
    }

    /// He-uniform weights scaled by `gain`, zero bias.
    pub fn conv2d(&mut self, name: &str, c_in: usize, c_out: usize, k: usize, cfg: ConvCfg, gain: f64) -> Result<Conv2d> {
        let fan_in = (c_in * k * k) as f64;
        let weight = self.uniform(&format!("{name}.weight"), &[c_out, c_in, k, k], gain * (6.0 / fan_in).sqrt())?;
        let bias = self.uniform(&format!("{name}.bias"), &[c_out], 0.0)?;
        Ok(Conv2d { weight, bias, cfg })
    }

    pub fn linear(&mut self, name: &str, d_in: usize, d_out: usize, gain: f64) -> Result<Linear> {
        let weight = self.uniform(&format!("{name}.weight"), &[d_out, d_in], gain * (6.0 / d_in as f64).sqrt())?;
        let bias = self.uniform(&format!("{name}.bias"), &[d_out], 0.0)?;
        Ok(Linear { weight, bias })
    }

    /// All trainable variables in name order.
    pub fn vars(&self) -> Vec<Var> {
        self.vars.values().cloned().collect()
    }

    pub fn named_vars(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    pub fn num_params(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    pub fn tensors(&self, prefix: &str) -> BTreeMap<String, Tensor> {
        self.vars.iter().map(|(k, v)| (format!("{prefix}{k}"), v.as_tensor().detach())).collect()
    }

    /// Overwrites every variable from `tensors[prefix + name]`.
    pub fn load(&self, tensors: &HashMap<String, Tensor>, prefix: &str) -> Result<()> {
        for (name, var) in &self.vars {
            let key = format!("{prefix}{name}");
            let t = tensors.get(&key).ok_or_else(|| Error::Checkpoint(format!("missing tensor {key}")))?;
            if t.dims() != var.dims() {
                return Err(Error::Checkpoint(format!("{key}: stored {:?}, expected {:?}", t.dims(), var.dims())));
            }
            var.set(&t.to_dtype(self.dtype)?)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ConvCfg {
    pub stride: usize,
    pub padding: usize,
}

impl ConvCfg {
    pub const SAME: ConvCfg = ConvCfg { stride: 1, padding: 1 };
    pub const POINTWISE: ConvCfg = ConvCfg { stride: 1, padding: 0 };
    pub const DOWN: ConvCfg = ConvCfg { stride: 2, padding: 1 };
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: Tensor,
    bias: Tensor,
    cfg: ConvCfg,
}

impl Conv2d {
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.forward_with_weight(x, &self.weight)
    }

    pub(crate) fn forward_with_weight(&self, x: &Tensor, weight: &Tensor) -> Result<Tensor> {
        let y = x.conv2d(weight, self.cfg.padding, self.cfg.stride, 1, 1)?;
        let c = self.bias.dims()[0];
        Ok(y.broadcast_add(&self.bias.reshape((1, c, 1, 1))?)?)
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dims()[0]
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    weight: Tensor,
    bias: Tensor,
}

impl Linear {
    /// `(B, in) -> (B, out)`
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.matmul(&self.weight.t()?)?.broadcast_add(&self.bias)?)
    }
}

pub fn leaky_relu(x: &Tensor, slope: f64) -> Result<Tensor> {
    Ok(x.maximum(&x.affine(slope, 0.0)?)?)
}

pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok(x.neg()?.exp()?.affine(1.0, 1.0)?.recip()?)
}

/// Exponential normalization along `dim`.
pub fn softmax(x: &Tensor, dim: usize) -> Result<Tensor> {
    let max = x.max_keepdim(dim)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    Ok(e.broadcast_div(&e.sum_keepdim(dim)?)?)
}

/// Writes a weight container; tensors are stored in name order.
pub fn save_container(path: &Path, tensors: &BTreeMap<String, Tensor>, meta: Value) -> Result<()> {
    let header = HashMap::from([("tamp".to_string(), meta.to_string())]);
    let bytes = safetensors::serialize(tensors.iter().map(|(k, v)| (k.as_str(), v)), Some(header))
        .map_err(|e| Error::Checkpoint(e.to_string()))?;
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub struct Container {
    pub tensors: HashMap<String, Tensor>,
    pub meta: Value,
}

/// Reads a container and checks that it is of the expected `kind`.
pub fn load_container(path: &Path, kind: &str) -> Result<Container> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let (_, header) = safetensors::SafeTensors::read_metadata(&bytes).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let raw = header
        .metadata()
        .as_ref()
        .and_then(|m| m.get("tamp"))
        .ok_or_else(|| Error::Checkpoint(format!("{}: not a tamp container", path.display())))?;
    let meta: Value = serde_json::from_str(raw)?;
    if meta["format"] != kind {
        return Err(Error::Checkpoint(format!("{}: expected {kind}, found {}", path.display(), meta["format"])));
    }
    if meta["format_version"].as_u64() != Some(CONTAINER_VERSION) {
        return Err(Error::Checkpoint(format!("{}: unsupported version {}", path.display(), meta["format_version"])));
    }
    let tensors = candle_core::safetensors::load_buffer(&bytes, &Device::Cpu)?;
    Ok(Container { tensors, meta })
}
