//! Noise predictors queried by the sampler.

use std::path::Path;

use candle_core::{DType, Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::complement::Image;
use crate::diffusion::schedule::NoiseSchedule;
use crate::error::{bail_shape, Error, Result};
use crate::nn::{load_container, save_container, Conv2d, ConvCfg, Linear, ParamStore, CONTAINER_VERSION};
use crate::training::optim::Adam;

/// Predicts the noise `ε̂` contained in `x_t` at model timestep `t`.
pub trait Denoiser {
    /// `x_t` is `(B, C, H, W)`; the result has the same shape.
    fn predict_noise(&self, x_t: &Tensor, t: usize) -> Result<Tensor>;
}

/// Knows the clean signal and returns exactly the noise that was mixed into
/// `x_t`: `ε̂ = (x_t − √ᾱ_t·x_0) / √(1 − ᾱ_t)`.
pub struct OracleDenoiser {
    clean: Tensor,
    schedule: NoiseSchedule,
}

impl OracleDenoiser {
    pub fn new(clean: Tensor, schedule: NoiseSchedule) -> Self {
        Self { clean, schedule }
    }
}

impl Denoiser for OracleDenoiser {
    fn predict_noise(&self, x_t: &Tensor, t: usize) -> Result<Tensor> {
        self.schedule.check(t)?;
        let ab = self.schedule.alpha_bar(t);
        let om = self.schedule.one_minus_alpha_bar(t);
        let signal = self.clean.to_dtype(x_t.dtype())?.affine(ab.sqrt(), 0.0)?;
        Ok(x_t.broadcast_sub(&signal)?.affine(1.0 / om.sqrt(), 0.0)?)
    }
}

/// Diffusion schedule the denoiser was trained with.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DiffusionConfig {
    pub train_timesteps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        Self { train_timesteps: 1000, beta_min: 1e-4, beta_max: 0.02 }
    }
}

impl DiffusionConfig {
    pub fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.train_timesteps, self.beta_min, self.beta_max)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DenoiserConfig {
    pub channels: usize,
    pub base_channels: usize,
    pub time_dim: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self { channels: 3, base_channels: 16, time_dim: 32 }
    }
}

/// Sinusoidal embedding of timesteps, `(B, dim)`.
fn timestep_embedding(ts: &[usize], dim: usize, dtype: DType) -> Result<Tensor> {
    let half = dim / 2;
    let mut v = Vec::with_capacity(ts.len() * dim);
    for &t in ts {
        for i in 0..half {
            let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
            v.push((t as f64 * freq).sin());
        }
        for i in 0..half {
            let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
            v.push((t as f64 * freq).cos());
        }
    }
    Ok(Tensor::from_vec(v, (ts.len(), 2 * half), &Device::Cpu)?.to_dtype(dtype)?)
}

/// Two-level U-Net noise predictor with additive timestep conditioning and
/// SiLU activations (smooth, so guidance gradients are well defined).
pub struct TinyUnet {
    cfg: DenoiserConfig,
    store: ParamStore,
    time_in: Linear,
    time_out: Linear,
    time_proj: [Linear; 3],
    conv_in: Conv2d,
    block0: Conv2d,
    down1: Conv2d,
    block1: Conv2d,
    down2: Conv2d,
    mid: Conv2d,
    up1: Conv2d,
    up0: Conv2d,
    conv_out: Conv2d,
}

impl TinyUnet {
    pub const CHECKPOINT_KIND: &'static str = "tamp-denoiser";

    pub fn new(cfg: DenoiserConfig, dtype: DType, seed: u64) -> Result<Self> {
        if cfg.channels == 0 || cfg.base_channels == 0 || cfg.time_dim < 2 {
            return Err(Error::Config("denoiser sizes must be positive".into()));
        }
        let mut s = ParamStore::new(dtype, seed);
        let (c, c0, c1) = (cfg.channels, cfg.base_channels, 2 * cfg.base_channels);
        let td = cfg.time_dim / 2 * 2;
        let hidden = 4 * c0;
        let time_in = s.linear("time.in", td, hidden, 1.0)?;
        let time_out = s.linear("time.out", hidden, hidden, 1.0)?;
        let time_proj = [s.linear("time.proj.0", hidden, c0, 0.5)?, s.linear("time.proj.1", hidden, c1, 0.5)?, s.linear("time.proj.2", hidden, c1, 0.5)?];
        Ok(Self {
            conv_in: s.conv2d("conv_in", c, c0, 3, ConvCfg::SAME, 1.0)?,
            block0: s.conv2d("block0", c0, c0, 3, ConvCfg::SAME, 1.0)?,
            down1: s.conv2d("down1", c0, c1, 3, ConvCfg::DOWN, 1.0)?,
            block1: s.conv2d("block1", c1, c1, 3, ConvCfg::SAME, 1.0)?,
            down2: s.conv2d("down2", c1, c1, 3, ConvCfg::DOWN, 1.0)?,
            mid: s.conv2d("mid", c1, c1, 3, ConvCfg::SAME, 1.0)?,
            up1: s.conv2d("up1", 2 * c1, c1, 3, ConvCfg::SAME, 1.0)?,
            up0: s.conv2d("up0", c1 + c0, c0, 3, ConvCfg::SAME, 1.0)?,
            conv_out: s.conv2d("conv_out", c0, c, 3, ConvCfg::SAME, 0.1)?,
            cfg,
            store: s,
            time_in,
            time_out,
            time_proj,
        })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    /// Noise prediction with a separate timestep per batch entry.
    pub fn forward(&self, x: &Tensor, ts: &[usize]) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        if c != self.cfg.channels || ts.len() != b {
            bail_shape!("denoiser got {:?} with {} timesteps", x.dims(), ts.len());
        }
        if h % 4 != 0 || w % 4 != 0 {
            bail_shape!("denoiser input {h}x{w} must be divisible by 4");
        }
        let dt = self.store.dtype();
        let emb = timestep_embedding(ts, self.cfg.time_dim / 2 * 2, dt)?;
        let emb = self.time_out.forward(&self.time_in.forward(&emb)?.silu()?)?.silu()?;
        let bias = |i: usize| -> Result<Tensor> {
            let p = self.time_proj[i].forward(&emb)?;
            let ch = p.dims()[1];
            Ok(p.reshape((b, ch, 1, 1))?)
        };
        let h0 = self.conv_in.forward(x)?.silu()?;
        let s0 = self.block0.forward(&h0)?.broadcast_add(&bias(0)?)?.silu()?;
        let h1 = self.down1.forward(&s0)?.silu()?;
        let s1 = self.block1.forward(&h1)?.broadcast_add(&bias(1)?)?.silu()?;
        let h2 = self.down2.forward(&s1)?.silu()?;
        let m = self.mid.forward(&h2)?.broadcast_add(&bias(2)?)?.silu()?;
        let u1 = Tensor::cat(&[&m.upsample_nearest2d(h / 2, w / 2)?, &s1], 1)?;
        let u1 = self.up1.forward(&u1)?.silu()?;
        let u0 = Tensor::cat(&[&u1.upsample_nearest2d(h, w)?, &s0], 1)?;
        let u0 = self.up0.forward(&u0)?.silu()?;
        self.conv_out.forward(&u0)
    }

    pub fn save(&self, path: &Path, diffusion: &DiffusionConfig) -> Result<()> {
        let meta = serde_json::json!({
            "format": Self::CHECKPOINT_KIND,
            "format_version": CONTAINER_VERSION,
            "denoiser": self.cfg,
            "diffusion": diffusion,
        });
        save_container(path, &self.store.tensors("denoiser."), meta)
    }

    pub fn load(path: &Path, dtype: DType) -> Result<(Self, DiffusionConfig)> {
        let c = load_container(path, Self::CHECKPOINT_KIND)?;
        let cfg: DenoiserConfig = serde_json::from_value(c.meta["denoiser"].clone())?;
        let diffusion: DiffusionConfig = serde_json::from_value(c.meta["diffusion"].clone())?;
        let net = Self::new(cfg, dtype, 0)?;
        net.store.load(&c.tensors, "denoiser.")?;
        Ok((net, diffusion))
    }
}

impl Denoiser for TinyUnet {
    fn predict_noise(&self, x_t: &Tensor, t: usize) -> Result<Tensor> {
        let b = x_t.dims()[0];
        self.forward(x_t, &vec![t; b])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DenoiserTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for DenoiserTrainConfig {
    fn default() -> Self {
        Self { steps: 2000, batch_size: 4, learning_rate: 2e-4, seed: 0 }
    }
}

/// Standard noise-regression training on clean images; returns the per-step
/// mean squared error.
pub fn train_denoiser(
    net: &TinyUnet,
    images: &[Image],
    diffusion: &DiffusionConfig,
    cfg: &DenoiserTrainConfig,
    mut on_step: impl FnMut(usize, f64),
) -> Result<Vec<f64>> {
    if images.is_empty() {
        return Err(Error::Validation("no training images for the denoiser".into()));
    }
    let schedule = diffusion.schedule()?;
    let dt = net.store.dtype();
    let mut opt = Adam::new(&net.store, cfg.learning_rate, 0.9, 0.999)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let mut clean = Vec::with_capacity(cfg.batch_size);
        let mut ts = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            clean.push(images[rng.random_range(0..images.len())].tensor().to_dtype(dt)?);
            ts.push(rng.random_range(1..=schedule.len()));
        }
        let x0 = Tensor::stack(&clean, 0)?;
        let noise = standard_normal(&mut rng, x0.dims(), dt)?;
        let sa: Vec<f64> = ts.iter().map(|&t| schedule.alpha_bar(t).sqrt()).collect();
        let sn: Vec<f64> = ts.iter().map(|&t| schedule.one_minus_alpha_bar(t).sqrt()).collect();
        let b = ts.len();
        let sa = Tensor::from_vec(sa, (b, 1, 1, 1), &Device::Cpu)?.to_dtype(dt)?;
        let sn = Tensor::from_vec(sn, (b, 1, 1, 1), &Device::Cpu)?.to_dtype(dt)?;
        let x_t = x0.broadcast_mul(&sa)?.add(&noise.broadcast_mul(&sn)?)?;
        let pred = net.forward(&x_t, &ts)?;
        let loss = pred.sub(&noise)?.sqr()?.mean_all()?;
        let value = loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        if !value.is_finite() {
            return Err(Error::NonFinite { what: "denoiser loss".into(), step });
        }
        let grads = loss.backward()?;
        opt.step(&opt.gradients(&grads))?;
        on_step(step, value);
        losses.push(value);
    }
    Ok(losses)
}

/// Standard-normal tensor drawn from `rng` in row-major order.
pub fn standard_normal(rng: &mut ChaCha8Rng, shape: &[usize], dtype: DType) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    Ok(Tensor::from_vec(v, shape, &Device::Cpu)?.to_dtype(dtype)?)
}
