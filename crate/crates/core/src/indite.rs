//! The interactive distribution-transition estimation network.
//!
//! Both captures run through one parameter-shared encoder. At the bottleneck
//! each branch is fused with its counterpart, filtered with per-pixel kernels
//! predicted from the counterpart, and decoded with its own skip features.
//! Two heads then produce the complemented image and a confidence map, again
//! through kernels predicted from the counterpart branch.
//!
//! Batched tensors stack branch 1 and branch 2 along the batch axis: for `B`
//! scene pairs the first `B` entries belong to branch 1 and the next `B` to
//! branch 2. Every cross-branch operation swaps the two halves, which makes
//! the network exactly symmetric under exchanging the inputs.

use std::collections::BTreeMap;
use std::path::Path;

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::complement::{Image, Mask, ScenePair};
use crate::error::{bail_shape, bail_validation, Error, Result};
use crate::nn::{leaky_relu, load_container, save_container, sigmoid, softmax, Container, Conv2d, ConvCfg, ParamStore, CONTAINER_VERSION};

const SLOPE: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackboneConfig {
    pub base_channels: usize,
    pub depth: usize,
    /// Side length `N` of the predicted filtering kernels; odd.
    pub kernel_size: usize,
    pub input_resolution: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self { base_channels: 32, depth: 4, kernel_size: 3, input_resolution: 256 }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.base_channels == 0 {
            return Err(Error::Config("base_channels must be positive".into()));
        }
        if self.depth == 0 {
            return Err(Error::Config("depth must be at least 1".into()));
        }
        if self.kernel_size == 0 || self.kernel_size % 2 == 0 {
            return Err(Error::Config(format!("kernel_size must be odd, got {}", self.kernel_size)));
        }
        self.check_resolution(self.input_resolution)
    }

    pub fn check_resolution(&self, res: usize) -> Result<()> {
        let step = 1usize << self.depth;
        if res == 0 || res % step != 0 {
            return Err(Error::Config(format!("resolution {res} is not divisible by 2^{} = {step}", self.depth)));
        }
        Ok(())
    }

    /// Channel width at pyramid level `l` (0 = full resolution).
    pub fn channels(&self, level: usize) -> usize {
        self.base_channels << level.min(2)
    }
}

/// Feature tensor `(B, C, h, w)` at some pyramid level.
#[derive(Debug, Clone)]
pub struct FeatureMap(pub Tensor);

impl FeatureMap {
    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        Ok(self.0.dims4()?)
    }
}

/// One normalized `N×N` kernel per spatial location, shared by all channels.
/// Stored as `(B, N², h, w)`; index `dy·N + dx` holds the weight for the
/// neighbor at offset `(dy − N/2, dx − N/2)`.
#[derive(Debug, Clone)]
pub struct KernelField {
    data: Tensor,
    size: usize,
}

impl KernelField {
    /// Wraps raw weights; caller is responsible for normalization.
    pub fn new(data: Tensor, size: usize) -> Result<Self> {
        if size % 2 == 0 {
            bail_validation!("kernel size must be odd, got {size}");
        }
        let (_, n2, _, _) = data.dims4()?;
        if n2 != size * size {
            bail_shape!("kernel field has {n2} taps, expected {}", size * size);
        }
        Ok(Self { data, size })
    }

    /// Exponential normalization of `(B, N², h, w)` logits over the tap axis.
    pub fn from_logits(logits: &Tensor, size: usize) -> Result<Self> {
        Self::new(softmax(logits, 1)?, size)
    }

    /// Kernel with all weight on the center tap.
    pub fn delta(b: usize, size: usize, h: usize, w: usize, dtype: DType) -> Result<Self> {
        let taps = size * size;
        let center = taps / 2;
        let mut v = vec![0f64; b * taps * h * w];
        for bi in 0..b {
            let start = (bi * taps + center) * h * w;
            v[start..start + h * w].fill(1.0);
        }
        let t = Tensor::from_vec(v, (b, taps, h, w), &candle_core::Device::Cpu)?.to_dtype(dtype)?;
        Self::new(t, size)
    }

    pub fn tensor(&self) -> &Tensor {
        &self.data
    }

    pub fn size(&self) -> usize {
        self.size
    }
}

/// `F̃[p] = Σ_{q ∈ N_p} K_p[q − p] · F[q]`, zero padding outside the map.
pub fn spf_filter(features: &FeatureMap, kernels: &KernelField) -> Result<FeatureMap> {
    let (b, _, h, w) = features.dims4()?;
    let (kb, _, kh, kw) = kernels.tensor().dims4()?;
    if (b, h, w) != (kb, kh, kw) {
        bail_shape!("features {:?} against kernels {:?}", features.0.dims(), kernels.tensor().dims());
    }
    let n = kernels.size();
    let r = n / 2;
    let padded = features.0.pad_with_zeros(2, r, r)?.pad_with_zeros(3, r, r)?;
    let mut acc: Option<Tensor> = None;
    for dy in 0..n {
        for dx in 0..n {
            let shifted = padded.narrow(2, dy, h)?.narrow(3, dx, w)?;
            let tap = kernels.tensor().narrow(1, dy * n + dx, 1)?;
            let term = shifted.broadcast_mul(&tap)?;
            acc = Some(match acc {
                None => term,
                Some(a) => (a + term)?,
            });
        }
    }
    Ok(FeatureMap(acc.expect("kernel has at least one tap")))
}

/// `C[p] = 1` iff `c_raw[p] > τ`, then forced to 1 on known pixels.
pub fn binarize_confidence(c_raw: &Tensor, tau: f64, known: &Mask) -> Result<Mask> {
    if !(tau > 0.0 && tau < 1.0) {
        bail_validation!("threshold {tau} outside (0, 1)");
    }
    if c_raw.dims() != known.tensor().dims() {
        bail_shape!("confidence {:?} against mask {:?}", c_raw.dims(), known.tensor().dims());
    }
    let above = c_raw.gt(tau)?.to_dtype(known.tensor().dtype())?;
    Ok(Mask::from_tensor_unchecked(above.maximum(known.tensor())?))
}

/// Per-level skip features of one encoding pass, finest first.
#[derive(Debug, Clone)]
pub struct SkipStack(pub Vec<Tensor>);

pub struct Encoded {
    pub features: [FeatureMap; 2],
    pub skips: [SkipStack; 2],
}

/// Which of the three kernel predictors to use.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KernelBranch {
    Backbone,
    Complement,
    Confidence,
}

struct KernelPredictor {
    hidden: Conv2d,
    taps: Conv2d,
    size: usize,
}

impl KernelPredictor {
    fn new(store: &mut ParamStore, name: &str, c: usize, size: usize) -> Result<Self> {
        Ok(Self {
            hidden: store.conv2d(&format!("{name}.hidden"), c, c, 1, ConvCfg::POINTWISE, 1.0)?,
            taps: store.conv2d(&format!("{name}.taps"), c, size * size, 1, ConvCfg::POINTWISE, 1.0)?,
            size,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<KernelField> {
        let h = leaky_relu(&self.hidden.forward(x)?, SLOPE)?;
        KernelField::from_logits(&self.taps.forward(&h)?, self.size)
    }
}

/// Raw network outputs for a batch of stacked branches.
pub struct ForwardOutput {
    /// Complement head output in `[-1, 1]`, `(2B, 3, H, W)`.
    pub complement: Tensor,
    /// Confidence head output in `[0, 1]`, `(2B, 1, H, W)`.
    pub confidence: Tensor,
}

#[derive(Debug, Clone)]
pub struct ComplementResult {
    /// Head output with known pixels restored from the input.
    pub complemented_1: Image,
    pub complemented_2: Image,
    pub raw_complement_1: Image,
    pub raw_complement_2: Image,
    /// `(1, H, W)` in `[0, 1]`.
    pub confidence_raw_1: Tensor,
    pub confidence_raw_2: Tensor,
    pub confidence_mask_1: Mask,
    pub confidence_mask_2: Mask,
}

impl ComplementResult {
    pub fn swapped(&self) -> Self {
        Self {
            complemented_1: self.complemented_2.clone(),
            complemented_2: self.complemented_1.clone(),
            raw_complement_1: self.raw_complement_2.clone(),
            raw_complement_2: self.raw_complement_1.clone(),
            confidence_raw_1: self.confidence_raw_2.clone(),
            confidence_raw_2: self.confidence_raw_1.clone(),
            confidence_mask_1: self.confidence_mask_2.clone(),
            confidence_mask_2: self.confidence_mask_1.clone(),
        }
    }
}

/// Swaps the branch-1 and branch-2 halves of a stacked batch.
pub fn counterpart(x: &Tensor) -> Result<Tensor> {
    let n = x.dims()[0];
    if n % 2 != 0 {
        bail_shape!("stacked batch of odd size {n}");
    }
    let half = n / 2;
    Ok(Tensor::cat(&[x.narrow(0, half, half)?, x.narrow(0, 0, half)?], 0)?)
}

/// `m ⊙ known + (1 − m) ⊙ generated`, mask broadcast over channels.
pub fn composite(known: &Tensor, generated: &Tensor, mask: &Tensor) -> Result<Tensor> {
    let keep = known.broadcast_mul(mask)?;
    let hole = generated.broadcast_mul(&mask.affine(-1.0, 1.0)?)?;
    Ok((keep + hole)?)
}

pub struct Indite {
    cfg: BackboneConfig,
    store: ParamStore,
    stem: Conv2d,
    down: Vec<Conv2d>,
    fuse_in: Conv2d,
    fuse_out: Conv2d,
    up: Vec<Conv2d>,
    kp_backbone: KernelPredictor,
    kp_complement: KernelPredictor,
    kp_confidence: KernelPredictor,
    to_image: Conv2d,
    to_confidence: Conv2d,
}

impl Indite {
    pub const CHECKPOINT_PREFIX: &'static str = "indite.";
    pub const CHECKPOINT_KIND: &'static str = "tamp-indite";

    pub fn new(cfg: BackboneConfig, dtype: DType, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new(dtype, seed);
        let c0 = cfg.channels(0);
        let cb = cfg.channels(cfg.depth);
        let n = cfg.kernel_size;
        let stem = store.conv2d("stem", 4, c0, 3, ConvCfg::SAME, 1.0)?;
        let down = (0..cfg.depth)
            .map(|l| store.conv2d(&format!("down.{l}"), cfg.channels(l), cfg.channels(l + 1), 3, ConvCfg::DOWN, 1.0))
            .collect::<Result<Vec<_>>>()?;
        let fuse_in = store.conv2d("fuse.in", 2 * cb, cb, 1, ConvCfg::POINTWISE, 1.0)?;
        let fuse_out = store.conv2d("fuse.out", cb, cb, 3, ConvCfg::SAME, 1.0)?;
        let up = (0..cfg.depth)
            .map(|l| {
                let c_in = cfg.channels(l + 1) + cfg.channels(l);
                store.conv2d(&format!("up.{l}"), c_in, cfg.channels(l), 3, ConvCfg::SAME, 1.0)
            })
            .collect::<Result<Vec<_>>>()?;
        let kp_backbone = KernelPredictor::new(&mut store, "kernels.backbone", cb, n)?;
        let kp_complement = KernelPredictor::new(&mut store, "kernels.complement", c0, n)?;
        let kp_confidence = KernelPredictor::new(&mut store, "kernels.confidence", c0, n)?;
        let to_image = store.conv2d("head.image", c0, 3, 1, ConvCfg::POINTWISE, 0.5)?;
        let to_confidence = store.conv2d("head.confidence", c0, 1, 1, ConvCfg::POINTWISE, 0.5)?;
        Ok(Self {
            cfg,
            store,
            stem,
            down,
            fuse_in,
            fuse_out,
            up,
            kp_backbone,
            kp_complement,
            kp_confidence,
            to_image,
            to_confidence,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    /// Writes the weights plus any `extra` tensors (e.g. optimizer state);
    /// `meta` fields are merged into the container header.
    pub fn save(&self, path: &Path, extra: BTreeMap<String, Tensor>, meta: serde_json::Map<String, Value>) -> Result<()> {
        let mut tensors = self.store.tensors(Self::CHECKPOINT_PREFIX);
        tensors.extend(extra);
        let mut header = serde_json::Map::new();
        header.insert("format".into(), Self::CHECKPOINT_KIND.into());
        header.insert("format_version".into(), CONTAINER_VERSION.into());
        header.insert("backbone".into(), serde_json::to_value(self.cfg)?);
        header.extend(meta);
        save_container(path, &tensors, Value::Object(header))
    }

    /// Reads a network checkpoint; the returned container keeps the header
    /// and any non-network tensors.
    pub fn load(path: &Path, dtype: DType) -> Result<(Self, Container)> {
        let c = load_container(path, Self::CHECKPOINT_KIND)?;
        let cfg: BackboneConfig = serde_json::from_value(c.meta["backbone"].clone())?;
        let net = Self::new(cfg, dtype, 0)?;
        net.store.load(&c.tensors, Self::CHECKPOINT_PREFIX)?;
        Ok((net, c))
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let (_, c, h, w) = x.dims4()?;
        if c != 4 {
            bail_shape!("network input must have 4 channels (image + mask), got {c}");
        }
        if h != w {
            bail_shape!("network input must be square, got {h}x{w}");
        }
        self.cfg.check_resolution(h)
    }

    /// Shared encoder on `(N, 4, H, W)` inputs.
    pub fn encode(&self, x: &Tensor) -> Result<(FeatureMap, SkipStack)> {
        self.check_input(x)?;
        let mut h = leaky_relu(&self.stem.forward(x)?, SLOPE)?;
        let mut skips = Vec::with_capacity(self.cfg.depth);
        for conv in &self.down {
            skips.push(h.clone());
            h = leaky_relu(&conv.forward(&h)?, SLOPE)?;
        }
        Ok((FeatureMap(h), SkipStack(skips)))
    }

    /// Encodes both branches with the same weights. Inputs are
    /// `(B, 3, H, W)` images in `[-1, 1]` and `(B, 1, H, W)` masks.
    pub fn encode_pair(&self, damaged_1: &Tensor, mask_1: &Tensor, damaged_2: &Tensor, mask_2: &Tensor) -> Result<Encoded> {
        let x1 = Tensor::cat(&[damaged_1, mask_1], 1)?;
        let x2 = Tensor::cat(&[damaged_2, mask_2], 1)?;
        let (f1, s1) = self.encode(&x1)?;
        let (f2, s2) = self.encode(&x2)?;
        Ok(Encoded { features: [f1, f2], skips: [s1, s2] })
    }

    /// Fuses `[f_i, f_j]` back to the width of one branch; the result feeds branch `i`.
    pub fn merge_features(&self, f_i: &FeatureMap, f_j: &FeatureMap) -> Result<FeatureMap> {
        if f_i.0.dims() != f_j.0.dims() {
            bail_shape!("merging {:?} with {:?}", f_i.0.dims(), f_j.0.dims());
        }
        let cat = Tensor::cat(&[&f_i.0, &f_j.0], 1)?;
        let h = leaky_relu(&self.fuse_in.forward(&cat)?, SLOPE)?;
        Ok(FeatureMap(leaky_relu(&self.fuse_out.forward(&h)?, SLOPE)?))
    }

    pub fn predict_kernels(&self, source: &FeatureMap, branch: KernelBranch) -> Result<KernelField> {
        let predictor = match branch {
            KernelBranch::Backbone => &self.kp_backbone,
            KernelBranch::Complement => &self.kp_complement,
            KernelBranch::Confidence => &self.kp_confidence,
        };
        predictor.forward(&source.0)
    }

    pub fn decode(&self, filtered: &FeatureMap, skips: &SkipStack) -> Result<FeatureMap> {
        if skips.0.len() != self.cfg.depth {
            bail_shape!("expected {} skip levels, got {}", self.cfg.depth, skips.0.len());
        }
        let mut h = filtered.0.clone();
        for l in (0..self.cfg.depth).rev() {
            let skip = &skips.0[l];
            let (_, _, sh, sw) = skip.dims4()?;
            let (hb, _, hh, hw) = h.dims4()?;
            if skip.dims()[0] != hb || (sh, sw) != (2 * hh, 2 * hw) {
                bail_shape!("skip level {l} {:?} does not match decoder state {:?}", skip.dims(), h.dims());
            }
            let upsampled = h.upsample_nearest2d(sh, sw)?;
            let cat = Tensor::cat(&[&upsampled, skip], 1)?;
            h = leaky_relu(&self.up[l].forward(&cat)?, SLOPE)?;
        }
        Ok(FeatureMap(h))
    }

    /// `tanh(P_3(spf(F̂_i, K_m^j)))`
    pub fn complement_head(&self, f_hat: &FeatureMap, kernels: &KernelField) -> Result<Tensor> {
        let filtered = spf_filter(f_hat, kernels)?;
        Ok(self.to_image.forward(&filtered.0)?.tanh()?)
    }

    /// Pre-activation logits of the confidence head.
    pub fn confidence_logits(&self, f_hat: &FeatureMap, kernels: &KernelField) -> Result<Tensor> {
        let filtered = spf_filter(f_hat, kernels)?;
        self.to_confidence.forward(&filtered.0)
    }

    /// `σ(P_1(spf(F̂_i, K_n^j)))` in `[0, 1]`.
    pub fn confidence_head(&self, f_hat: &FeatureMap, kernels: &KernelField) -> Result<Tensor> {
        sigmoid(&self.confidence_logits(f_hat, kernels)?)
    }

    /// Full pipeline on a stacked batch `(2B, 4, H, W)` (see module docs).
    pub fn forward_stacked(&self, x: &Tensor) -> Result<ForwardOutput> {
        let (f, skips) = self.encode(x)?;
        let fj = FeatureMap(counterpart(&f.0)?);
        let merged = self.merge_features(&f, &fj)?;
        let kernels = self.predict_kernels(&FeatureMap(counterpart(&merged.0)?), KernelBranch::Backbone)?;
        let filtered = spf_filter(&merged, &kernels)?;
        let f_hat = self.decode(&filtered, &skips)?;
        let f_hat_j = FeatureMap(counterpart(&f_hat.0)?);
        let k_m = self.predict_kernels(&f_hat_j, KernelBranch::Complement)?;
        let k_n = self.predict_kernels(&f_hat_j, KernelBranch::Confidence)?;
        Ok(ForwardOutput { complement: self.complement_head(&f_hat, &k_m)?, confidence: self.confidence_head(&f_hat, &k_n)? })
    }

    /// Stacks `(B, ·, H, W)` branch tensors and runs [`Self::forward_stacked`].
    pub fn forward_batch(&self, damaged_1: &Tensor, mask_1: &Tensor, damaged_2: &Tensor, mask_2: &Tensor) -> Result<ForwardOutput> {
        let x1 = Tensor::cat(&[damaged_1, mask_1], 1)?;
        let x2 = Tensor::cat(&[damaged_2, mask_2], 1)?;
        self.forward_stacked(&Tensor::cat(&[x1, x2], 0)?)
    }

    pub fn forward(&self, pair: &ScenePair, tau: f64) -> Result<ComplementResult> {
        let dt = self.dtype();
        let d1 = pair.damaged_1.tensor().to_dtype(dt)?.unsqueeze(0)?;
        let d2 = pair.damaged_2.tensor().to_dtype(dt)?.unsqueeze(0)?;
        let m1 = pair.mask_1.tensor().to_dtype(dt)?.unsqueeze(0)?;
        let m2 = pair.mask_2.tensor().to_dtype(dt)?.unsqueeze(0)?;
        let out = self.forward_batch(&d1, &m1, &d2, &m2)?;
        let raw_1 = out.complement.get(0)?;
        let raw_2 = out.complement.get(1)?;
        let conf_1 = out.confidence.get(0)?;
        let conf_2 = out.confidence.get(1)?;
        let mask_1 = pair.mask_1.to_dtype(dt)?;
        let mask_2 = pair.mask_2.to_dtype(dt)?;
        Ok(ComplementResult {
            complemented_1: Image::from_tensor_unchecked(composite(&d1.get(0)?, &raw_1, mask_1.tensor())?),
            complemented_2: Image::from_tensor_unchecked(composite(&d2.get(0)?, &raw_2, mask_2.tensor())?),
            confidence_mask_1: binarize_confidence(&conf_1, tau, &mask_1)?,
            confidence_mask_2: binarize_confidence(&conf_2, tau, &mask_2)?,
            raw_complement_1: Image::from_tensor_unchecked(raw_1),
            raw_complement_2: Image::from_tensor_unchecked(raw_2),
            confidence_raw_1: conf_1,
            confidence_raw_2: conf_2,
        })
    }
}
