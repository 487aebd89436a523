//! Null-space projected reverse diffusion for an image pair, with optional
//! low-frequency cross-reference guidance between the two branches.

use candle_core::{DType, Device, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::complement::{Image, Mask, ScenePair};
use crate::diffusion::denoiser::{standard_normal, Denoiser};
use crate::diffusion::schedule::NoiseSchedule;
use crate::error::{bail_shape, bail_validation, Error, Result};
use crate::indite::{counterpart, ComplementResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
#[value(rename_all = "kebab-case")]
pub enum SamplerMode {
    /// Projection on the raw damaged images.
    Ddnm,
    /// Raw projection plus cross-reference guidance.
    DdnmInteract,
    /// Projection on the complemented, confidence-masked images.
    InditeDdnm,
    /// Complemented projection plus cross-reference guidance.
    InditeDiff,
}

impl SamplerMode {
    pub const ALL: [SamplerMode; 4] = [Self::Ddnm, Self::DdnmInteract, Self::InditeDdnm, Self::InditeDiff];

    pub fn uses_guidance(self) -> bool {
        matches!(self, Self::DdnmInteract | Self::InditeDiff)
    }

    pub fn uses_complement(self) -> bool {
        matches!(self, Self::InditeDdnm | Self::InditeDiff)
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Ddnm => "ddnm",
            Self::DdnmInteract => "ddnm-interact",
            Self::InditeDdnm => "indite-ddnm",
            Self::InditeDiff => "indite-diff",
        }
    }
}

impl std::fmt::Display for SamplerMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Which branches receive the guidance correction at a given step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GuidanceSchedule {
    Both,
    /// Branch 1 on odd steps, branch 2 on even steps.
    Alternate,
}

/// Re-expansion used by the low-pass filter after block averaging.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Upsample {
    Nearest,
    Bilinear,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    pub mode: SamplerMode,
    pub guidance_weight: f64,
    pub lowpass_scale: usize,
    pub steps: usize,
    pub seed: u64,
    pub guidance_schedule: GuidanceSchedule,
    pub upsample: Upsample,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            mode: SamplerMode::InditeDiff,
            guidance_weight: 0.5,
            lowpass_scale: 4,
            steps: 100,
            seed: 0,
            guidance_schedule: GuidanceSchedule::Both,
            upsample: Upsample::Nearest,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.guidance_weight >= 0.0 && self.guidance_weight.is_finite()) {
            return Err(Error::Config(format!("guidance_weight must be >= 0, got {}", self.guidance_weight)));
        }
        if self.lowpass_scale == 0 {
            return Err(Error::Config("lowpass_scale must be >= 1".into()));
        }
        if self.steps == 0 {
            return Err(Error::Config("steps must be >= 1".into()));
        }
        Ok(())
    }
}

/// Observation for one branch: `observed` is zero outside `keep`.
#[derive(Debug, Clone)]
pub struct BranchInput {
    pub observed: Image,
    pub keep: Mask,
}

impl BranchInput {
    pub fn new(observed: &Image, keep: &Mask) -> Result<Self> {
        let (_, h, w) = observed.dims();
        if keep.dims() != (h, w) {
            bail_shape!("observation {}x{} with keep mask {:?}", h, w, keep.dims());
        }
        let keep = keep.to_dtype(observed.tensor().dtype())?;
        let masked = observed.tensor().broadcast_mul(keep.tensor())?;
        Ok(Self { observed: Image::from_tensor_unchecked(masked), keep })
    }
}

/// Per-mode sampler inputs: raw damaged images and masks, or the
/// confidence-masked complements.
pub fn branch_inputs(mode: SamplerMode, pair: &ScenePair, complement: Option<&ComplementResult>) -> Result<[BranchInput; 2]> {
    if mode.uses_complement() {
        let c = complement.ok_or_else(|| Error::Validation(format!("mode {mode} needs complement results")))?;
        Ok([
            BranchInput::new(&c.complemented_1, &c.confidence_mask_1)?,
            BranchInput::new(&c.complemented_2, &c.confidence_mask_2)?,
        ])
    } else {
        Ok([BranchInput::new(&pair.damaged_1, &pair.mask_1)?, BranchInput::new(&pair.damaged_2, &pair.mask_2)?])
    }
}

/// `x_{0|t} = (x_t − √(1−ᾱ_t)·ε̂) / √ᾱ_t`, clamped to `[-1, 1]`. `t` indexes
/// `schedule`; the denoiser is queried at the matching model timestep.
pub fn estimate_x0(x_t: &Tensor, t: usize, denoiser: &dyn Denoiser, schedule: &NoiseSchedule) -> Result<Tensor> {
    schedule.check(t)?;
    let eps = denoiser.predict_noise(x_t, schedule.model_timestep(t))?;
    if eps.dims() != x_t.dims() {
        bail_shape!("denoiser returned {:?} for input {:?}", eps.dims(), x_t.dims());
    }
    let ab = schedule.alpha_bar(t);
    let om = schedule.one_minus_alpha_bar(t);
    let x0 = x_t.sub(&eps.affine(om.sqrt(), 0.0)?)?.affine(1.0 / ab.sqrt(), 0.0)?;
    Ok(x0.clamp(-1.0, 1.0)?)
}

/// `observed ⊙ keep + x0_est ⊙ (1 − keep)`.
pub fn ddnm_project(x0_est: &Tensor, observed: &Tensor, keep: &Tensor) -> Result<Tensor> {
    let rank = x0_est.rank();
    if observed.dims() != x0_est.dims() || keep.rank() != rank || keep.dims()[rank - 2..] != x0_est.dims()[rank - 2..] {
        bail_shape!("projection shapes {:?}, {:?}, {:?}", x0_est.dims(), observed.dims(), keep.dims());
    }
    let keep_part = observed.broadcast_mul(keep)?;
    let null_part = x0_est.broadcast_mul(&keep.affine(-1.0, 1.0)?)?;
    Ok(keep_part.add(&null_part)?)
}

/// One ancestral step; `noise = None` is the deterministic variant.
pub fn posterior_step(x0_hat: &Tensor, x_t: &Tensor, t: usize, schedule: &NoiseSchedule, noise: Option<&Tensor>) -> Result<Tensor> {
    schedule.check(t)?;
    if x0_hat.dims() != x_t.dims() {
        bail_shape!("posterior step shapes {:?} vs {:?}", x0_hat.dims(), x_t.dims());
    }
    let (c0, ct) = schedule.posterior_coefficients(t);
    let mut out = x0_hat.affine(c0, 0.0)?.add(&x_t.affine(ct, 0.0)?)?;
    if let Some(z) = noise {
        let s = schedule.sigma(t);
        if s > 0.0 {
            out = out.add(&z.affine(s, 0.0)?)?;
        }
    }
    Ok(out)
}

/// `n × n` row-major matrix of the down-then-up operator along one axis.
pub fn lowpass_matrix(n: usize, d: usize, upsample: Upsample) -> Result<Vec<f64>> {
    if d == 0 || n % d != 0 {
        bail_shape!("size {n} is not divisible by low-pass scale {d}");
    }
    let m = n / d;
    // up: n × m, down: m × n (block mean)
    let mut up = vec![0.0; n * m];
    for j in 0..n {
        match upsample {
            Upsample::Nearest => up[j * m + j / d] = 1.0,
            Upsample::Bilinear => {
                let src = ((j as f64 + 0.5) / d as f64 - 0.5).clamp(0.0, (m - 1) as f64);
                let k0 = src.floor() as usize;
                let k1 = (k0 + 1).min(m - 1);
                let frac = src - k0 as f64;
                up[j * m + k0] += 1.0 - frac;
                up[j * m + k1] += frac;
            }
        }
    }
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            out[i * n + j] = up[i * m + j / d] / d as f64;
        }
    }
    Ok(out)
}

/// Applies the separable low-pass operator to the last two axes.
pub fn low_pass_tensor(x: &Tensor, d: usize, upsample: Upsample) -> Result<Tensor> {
    let rank = x.rank();
    if rank < 2 {
        bail_shape!("low-pass needs at least 2 dims, got {:?}", x.dims());
    }
    if d == 0 {
        bail_validation!("low-pass scale must be >= 1");
    }
    if d == 1 {
        return Ok(x.clone());
    }
    let (h, w) = (x.dims()[rank - 2], x.dims()[rank - 1]);
    let lh = Tensor::from_vec(lowpass_matrix(h, d, upsample)?, (h, h), &Device::Cpu)?.to_dtype(x.dtype())?;
    let lw = Tensor::from_vec(lowpass_matrix(w, d, upsample)?, (w, w), &Device::Cpu)?.to_dtype(x.dtype())?;
    let y = x.contiguous()?.broadcast_matmul(&lw.t()?.contiguous()?)?;
    Ok(lh.broadcast_matmul(&y)?)
}

/// `φ_D`: block average by `d`, then re-expand to the original size.
pub fn low_pass(img: &Image, d: usize, upsample: Upsample) -> Result<Image> {
    Ok(Image::from_tensor_unchecked(low_pass_tensor(img.tensor(), d, upsample)?))
}

#[derive(Debug, Clone)]
pub struct Correction {
    pub corrected: Tensor,
    /// Mean absolute low-pass residual per batch entry.
    pub residual_mean_abs: Vec<f64>,
    /// L2 norm of the applied gradient per batch entry.
    pub gradient_norm: Vec<f64>,
}

/// Cross-reference guidance: subtracts `ω ∇_{x_t} ½‖φ_D(ref ⊙ C) − φ_D(x̂0 ⊙ C)‖²`
/// from `x_prev`. `x0_hat` must be computed from `x_t` so the gradient can be
/// traced back through the denoiser. All tensors are batched; each batch entry
/// gets its own gradient, and entries where `active` is false are left
/// unchanged.
#[allow(clippy::too_many_arguments)]
pub fn cross_reference_correct(
    x_prev: &Tensor,
    x_t: &Var,
    x0_hat: &Tensor,
    reference: &Tensor,
    ref_mask: &Tensor,
    omega: f64,
    d: usize,
    upsample: Upsample,
    active: Option<&[bool]>,
) -> Result<Correction> {
    if !(omega >= 0.0 && omega.is_finite()) {
        bail_validation!("guidance weight must be >= 0, got {omega}");
    }
    if x_prev.dims() != x_t.dims() || x0_hat.dims() != x_t.dims() || reference.dims() != x_t.dims() {
        bail_shape!(
            "guidance shapes x_prev {:?}, x_t {:?}, x0 {:?}, reference {:?}",
            x_prev.dims(),
            x_t.dims(),
            x0_hat.dims(),
            reference.dims()
        );
    }
    let b = x_t.dims()[0];
    let target = low_pass_tensor(&reference.broadcast_mul(ref_mask)?.detach(), d, upsample)?;
    let estimate = low_pass_tensor(&x0_hat.broadcast_mul(ref_mask)?, d, upsample)?;
    let residual = target.sub(&estimate)?;
    let per_entry = |t: &Tensor| -> Result<Vec<f64>> {
        Ok(t.flatten_from(1)?.to_dtype(DType::F64)?.to_vec2::<f64>()?.iter().map(|r| r.iter().sum()).collect())
    };
    let n_per = residual.elem_count() / b.max(1);
    let residual_mean_abs: Vec<f64> = per_entry(&residual.abs()?.detach())?.iter().map(|s| s / n_per as f64).collect();
    let loss = residual.sqr()?.sum_all()?.affine(0.5, 0.0)?;
    let grads = loss.backward()?;
    let grad = match grads.get(x_t.as_tensor()) {
        Some(g) => g.clone(),
        None => x_t.zeros_like()?,
    };
    let grad = match active {
        Some(flags) => {
            if flags.len() != b {
                bail_shape!("{} activity flags for batch of {b}", flags.len());
            }
            let f: Vec<f64> = flags.iter().map(|&a| if a { 1.0 } else { 0.0 }).collect();
            let mut shape = vec![1usize; x_t.rank()];
            shape[0] = b;
            grad.broadcast_mul(&Tensor::from_vec(f, shape, &Device::Cpu)?.to_dtype(grad.dtype())?)?
        }
        None => grad,
    };
    let gradient_norm = per_entry(&grad.sqr()?)?.iter().map(|s| s.sqrt()).collect();
    let corrected = if omega == 0.0 { x_prev.clone() } else { x_prev.sub(&grad.affine(omega, 0.0)?)? };
    Ok(Correction { corrected, residual_mean_abs, gradient_norm })
}

/// Per-step sampling summary for one branch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub t: usize,
    pub branch: usize,
    pub residual_mean_abs: f64,
    pub guidance_norm: f64,
}

#[derive(Debug, Clone)]
pub struct DuoSample {
    pub outputs: [Image; 2],
    pub trace: Vec<TraceRecord>,
}

fn ensure_finite(x: &Tensor, step: usize) -> Result<()> {
    let s = x.abs()?.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
    if !s.is_finite() {
        return Err(Error::NonFinite { what: "sampler state".into(), step });
    }
    Ok(())
}

/// Runs both branches jointly from `t = T` down to `1` on `schedule` (already
/// respaced to the desired number of steps). The branches are stacked along
/// the batch axis so they advance in lockstep; guidance for branch `i` uses
/// the counterpart's current projected estimate under the counterpart's keep
/// mask. The last step returns the projected estimate unguided, so known
/// pixels are reproduced exactly.
pub fn sample_duo(inputs: &[BranchInput; 2], denoiser: &dyn Denoiser, schedule: &NoiseSchedule, cfg: &SamplerConfig) -> Result<DuoSample> {
    cfg.validate()?;
    let dims = inputs[0].observed.dims();
    if inputs[1].observed.dims() != dims {
        bail_shape!("branch images differ: {:?} vs {:?}", dims, inputs[1].observed.dims());
    }
    let dt = inputs[0].observed.tensor().dtype();
    let observed = Tensor::stack(&[inputs[0].observed.tensor(), &inputs[1].observed.tensor().to_dtype(dt)?], 0)?;
    let keep = Tensor::stack(&[inputs[0].keep.tensor().to_dtype(dt)?, inputs[1].keep.tensor().to_dtype(dt)?], 0)?;
    let guided = cfg.mode.uses_guidance() && cfg.guidance_weight > 0.0;
    if guided {
        let (_, h, w) = dims;
        if h % cfg.lowpass_scale != 0 || w % cfg.lowpass_scale != 0 {
            bail_shape!("image {h}x{w} is not divisible by low-pass scale {}", cfg.lowpass_scale);
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let big_t = schedule.len();
    let init_noise = standard_normal(&mut rng, observed.dims(), dt)?;
    let mut x = observed
        .affine(schedule.alpha_bar(big_t).sqrt(), 0.0)?
        .add(&init_noise.affine(schedule.one_minus_alpha_bar(big_t).sqrt(), 0.0)?)?;
    let mut trace = Vec::new();
    for t in (1..=big_t).rev() {
        let noise = standard_normal(&mut rng, observed.dims(), dt)?;
        let guide_now = guided && t > 1;
        let x_var = Var::from_tensor(&x.detach())?;
        let x_t = if guide_now { x_var.as_tensor().clone() } else { x.detach() };
        let x0 = estimate_x0(&x_t, t, denoiser, schedule)?;
        let x0_hat = ddnm_project(&x0, &observed, &keep)?;
        let x_prev = posterior_step(&x0_hat.detach(), &x_t.detach(), t, schedule, Some(&noise))?;
        x = if guide_now {
            let reference = counterpart(&x0_hat.detach())?;
            let ref_mask = counterpart(&keep)?;
            let active = match cfg.guidance_schedule {
                GuidanceSchedule::Both => [true, true],
                GuidanceSchedule::Alternate => [t % 2 == 1, t % 2 == 0],
            };
            let c = cross_reference_correct(
                &x_prev,
                &x_var,
                &x0_hat,
                &reference,
                &ref_mask,
                cfg.guidance_weight,
                cfg.lowpass_scale,
                cfg.upsample,
                Some(&active),
            )?;
            for branch in 0..2 {
                trace.push(TraceRecord {
                    t,
                    branch: branch + 1,
                    residual_mean_abs: c.residual_mean_abs[branch],
                    guidance_norm: c.gradient_norm[branch],
                });
            }
            c.corrected.detach()
        } else {
            for branch in 0..2 {
                trace.push(TraceRecord { t, branch: branch + 1, residual_mean_abs: 0.0, guidance_norm: 0.0 });
            }
            x_prev
        };
        ensure_finite(&x, t)?;
    }
    let out = x.clamp(-1.0, 1.0)?;
    Ok(DuoSample { outputs: [Image::from_tensor_unchecked(out.get(0)?), Image::from_tensor_unchecked(out.get(1)?)], trace })
}
