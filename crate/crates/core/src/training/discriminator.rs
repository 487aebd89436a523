use candle_core::{DType, Device, Tensor};

use crate::error::{bail_shape, Result};
use crate::nn::{leaky_relu, Conv2d, ConvCfg, ParamStore};
use crate::training::losses::Scorer;

const POWER_ITERATIONS: usize = 4;

/// Divides a convolution weight by an estimate of its largest singular value.
///
/// The estimate uses power iteration from a fixed start vector on the
/// detached weight, so it carries no state between calls; the gradient flows
/// through `σ = uᵀ W v` with `u`, `v` held constant.
pub fn spectral_normalize(weight: &Tensor) -> Result<Tensor> {
    let dims = weight.dims().to_vec();
    let rows = dims[0];
    let cols: usize = dims[1..].iter().product();
    let w = weight.reshape((rows, cols))?;
    let wd = w.detach();
    let normalize = |x: Tensor| -> Result<Tensor> {
        let n = x.sqr()?.sum_all()?.sqrt()?.affine(1.0, 1e-12)?;
        Ok(x.broadcast_div(&n)?)
    };
    let mut u = Tensor::ones((rows, 1), weight.dtype(), &Device::Cpu)?;
    u = normalize(u)?;
    let mut v = normalize(wd.t()?.matmul(&u)?)?;
    for _ in 0..POWER_ITERATIONS {
        u = normalize(wd.matmul(&v)?)?;
        v = normalize(wd.t()?.matmul(&u)?)?;
    }
    let sigma = u.t()?.matmul(&w.matmul(&v)?)?.reshape(())?;
    Ok(weight.broadcast_div(&sigma)?)
}

/// Five-layer patch classifier with spectrally normalized 4×4 convolutions.
pub struct PatchDiscriminator {
    layers: Vec<Conv2d>,
    store: ParamStore,
}

impl PatchDiscriminator {
    pub fn new(in_channels: usize, base_channels: usize, dtype: DType, seed: u64) -> Result<Self> {
        let mut store = ParamStore::new(dtype, seed);
        let b = base_channels;
        let plan = [
            (in_channels, b, 2),
            (b, 2 * b, 2),
            (2 * b, 4 * b, 2),
            (4 * b, 8 * b, 1),
            (8 * b, 1, 1),
        ];
        let layers = plan
            .iter()
            .enumerate()
            .map(|(i, &(c_in, c_out, stride))| {
                store.conv2d(&format!("conv.{i}"), c_in, c_out, 4, ConvCfg { stride, padding: 1 }, 1.0)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { layers, store })
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    /// Smallest square input that yields a non-empty score map.
    pub const MIN_RESOLUTION: usize = 32;
}

impl Scorer for PatchDiscriminator {
    fn score(&self, x: &Tensor) -> Result<Tensor> {
        let (_, _, h, w) = x.dims4()?;
        if h < Self::MIN_RESOLUTION || w < Self::MIN_RESOLUTION {
            bail_shape!("discriminator needs at least {0}x{0} inputs, got {h}x{w}", Self::MIN_RESOLUTION);
        }
        let last = self.layers.len() - 1;
        let mut h = x.clone();
        for (i, conv) in self.layers.iter().enumerate() {
            h = conv.forward_with_weight(&h, &spectral_normalize(conv.weight())?)?;
            if i != last {
                h = leaky_relu(&h, 0.2)?;
            }
        }
        Ok(h)
    }
}
