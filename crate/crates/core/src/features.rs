//! Multi-level feature functions used by the perceptual and style losses and
//! by the perceptual distance metric.

use candle_core::{DType, Tensor};

use crate::error::{bail_shape, Result};
use crate::nn::{Conv2d, ConvCfg, ParamStore};

/// A fixed function mapping `(B, 3, H, W)` images to a feature pyramid.
///
/// Implementations must not be trained by the losses that use them. A
/// pretrained classifier can be plugged in by implementing this trait.
pub trait FeatureExtractor {
    fn features(&self, x: &Tensor) -> Result<Vec<Tensor>>;
}

/// Small convolutional pyramid with fixed seeded random weights.
pub struct RandomPyramid {
    levels: Vec<Conv2d>,
    _store: ParamStore,
}

impl RandomPyramid {
    pub const DEFAULT_SEED: u64 = 0x7a3f_0001;
    const WIDTHS: [usize; 3] = [8, 16, 32];

    pub fn new(dtype: DType, seed: u64) -> Result<Self> {
        let mut store = ParamStore::new(dtype, seed);
        let mut levels = Vec::new();
        let mut c_in = 3;
        for (l, &c_out) in Self::WIDTHS.iter().enumerate() {
            let cfg = if l == 0 { ConvCfg::SAME } else { ConvCfg::DOWN };
            levels.push(store.conv2d(&format!("level.{l}"), c_in, c_out, 3, cfg, 1.0)?);
            c_in = c_out;
        }
        Ok(Self { levels, _store: store })
    }

    pub fn with_default_seed(dtype: DType) -> Result<Self> {
        Self::new(dtype, Self::DEFAULT_SEED)
    }

    /// Smallest spatial size that keeps every level non-empty.
    pub fn min_resolution(&self) -> usize {
        1 << (self.levels.len() - 1)
    }
}

impl FeatureExtractor for RandomPyramid {
    fn features(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        let (_, c, h, w) = x.dims4()?;
        if c != 3 {
            bail_shape!("feature extractor expects 3 channels, got {c}");
        }
        if h < self.min_resolution() || w < self.min_resolution() {
            bail_shape!("input {h}x{w} is smaller than the extractor's {} pixel minimum", self.min_resolution());
        }
        let mut out = Vec::with_capacity(self.levels.len());
        let mut h = x.clone();
        for conv in &self.levels {
            h = conv.forward(&h)?.relu()?;
            out.push(h.clone());
        }
        Ok(out)
    }
}
