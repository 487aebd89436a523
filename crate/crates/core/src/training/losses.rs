//! The four-term objective shared by the complement and confidence heads:
//! L1, adversarial, perceptual and style losses.
//!
//! All functions take batched `(B, C, H, W)` tensors and return scalar
//! tensors so they can be differentiated.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{bail_shape, Error, Result};
use crate::features::FeatureExtractor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub lambda4: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda1: 1.0, lambda2: 0.1, lambda3: 0.1, lambda4: 250.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda1", self.lambda1), ("lambda2", self.lambda2), ("lambda3", self.lambda3), ("lambda4", self.lambda4)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be a nonnegative number, got {v}")));
            }
        }
        Ok(())
    }
}

/// Scores images with patch-level logits.
pub trait Scorer {
    fn score(&self, x: &Tensor) -> Result<Tensor>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AdversarialObjective {
    /// Binary cross-entropy on logits; the generator maximizes `log D(fake)`.
    #[default]
    NonSaturating,
    Hinge,
}

fn softplus(x: &Tensor) -> Result<Tensor> {
    // relu(x) + log(1 + exp(-|x|))
    Ok(x.relu()?.add(&x.abs()?.neg()?.exp()?.affine(1.0, 1.0)?.log()?)?)
}

impl AdversarialObjective {
    /// Generator loss from the scores of generated images.
    pub fn generator(&self, fake: &Tensor) -> Result<Tensor> {
        match self {
            Self::NonSaturating => Ok(softplus(&fake.neg()?)?.mean_all()?),
            Self::Hinge => Ok(fake.mean_all()?.neg()?),
        }
    }

    pub fn discriminator(&self, real: &Tensor, fake: &Tensor) -> Result<Tensor> {
        match self {
            Self::NonSaturating => {
                let r = softplus(&real.neg()?)?.mean_all()?;
                let f = softplus(fake)?.mean_all()?;
                Ok((r + f)?.affine(0.5, 0.0)?)
            }
            Self::Hinge => {
                let r = real.affine(-1.0, 1.0)?.relu()?.mean_all()?;
                let f = fake.affine(1.0, 1.0)?.relu()?.mean_all()?;
                Ok((r + f)?)
            }
        }
    }
}

fn same_shape(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.dims() != b.dims() {
        bail_shape!("{:?} against {:?}", a.dims(), b.dims());
    }
    Ok(())
}

pub fn l1_loss(pred: &Tensor, target: &Tensor) -> Result<Tensor> {
    same_shape(pred, target)?;
    Ok(pred.sub(target)?.abs()?.mean_all()?)
}

/// `(generator_loss, discriminator_loss)`; the discriminator sees `pred`
/// detached.
pub fn adversarial_losses(pred: &Tensor, target: &Tensor, disc: &dyn Scorer, objective: AdversarialObjective) -> Result<(Tensor, Tensor)> {
    same_shape(pred, target)?;
    let gen = objective.generator(&disc.score(pred)?)?;
    let real = disc.score(target)?;
    let fake = disc.score(&pred.detach())?;
    Ok((gen, objective.discriminator(&real, &fake)?))
}

fn paired_features(pred: &Tensor, target: &Tensor, extractor: &dyn FeatureExtractor) -> Result<Vec<(Tensor, Tensor)>> {
    same_shape(pred, target)?;
    let a = extractor.features(pred)?;
    let b = extractor.features(target)?;
    Ok(a.into_iter().zip(b).collect())
}

fn sum_scalars(terms: Vec<Tensor>) -> Result<Tensor> {
    let mut it = terms.into_iter();
    let first = it.next().ok_or_else(|| Error::Validation("extractor produced no features".into()))?;
    it.try_fold(first, |acc, t| Ok(acc.add(&t)?))
}

/// Sum over levels of the mean absolute feature difference.
pub fn perceptual_loss(pred: &Tensor, target: &Tensor, extractor: &dyn FeatureExtractor) -> Result<Tensor> {
    let terms = paired_features(pred, target, extractor)?
        .into_iter()
        .map(|(a, b)| Ok(a.sub(&b)?.abs()?.mean_all()?))
        .collect::<Result<Vec<_>>>()?;
    sum_scalars(terms)
}

/// Channel Gram matrices `(B, C, C)` normalized by `C·H·W`.
pub fn gram(f: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = f.dims4()?;
    let flat = f.reshape((b, c, h * w))?;
    Ok(flat.matmul(&flat.transpose(1, 2)?.contiguous()?)?.affine(1.0 / (c * h * w) as f64, 0.0)?)
}

/// Sum over levels of the mean absolute Gram-matrix difference.
pub fn style_loss(pred: &Tensor, target: &Tensor, extractor: &dyn FeatureExtractor) -> Result<Tensor> {
    let terms = paired_features(pred, target, extractor)?
        .into_iter()
        .map(|(a, b)| Ok(gram(&a)?.sub(&gram(&b)?)?.abs()?.mean_all()?))
        .collect::<Result<Vec<_>>>()?;
    sum_scalars(terms)
}

/// The weighted terms of one head's objective.
#[derive(Debug, Clone)]
pub struct LossTerms {
    pub l1: Tensor,
    pub gan: Tensor,
    pub perceptual: Tensor,
    pub style: Tensor,
    pub total: Tensor,
}

impl LossTerms {
    pub fn scalars(&self) -> Result<[f64; 5]> {
        let f = |t: &Tensor| -> Result<f64> { Ok(t.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?) };
        Ok([f(&self.l1)?, f(&self.gan)?, f(&self.perceptual)?, f(&self.style)?, f(&self.total)?])
    }
}

/// `λ1·L1 + λ2·L_gan + λ3·L_pct + λ4·L_sty`. Terms with zero weight are
/// not evaluated, so `disc` may be `None` when `λ2 = 0`.
pub fn weighted_objective(
    pred: &Tensor,
    target: &Tensor,
    weights: &LossWeights,
    disc: Option<&dyn Scorer>,
    extractor: &dyn FeatureExtractor,
    objective: AdversarialObjective,
) -> Result<LossTerms> {
    weights.validate()?;
    same_shape(pred, target)?;
    let zero = pred.zeros_like()?.sum_all()?;
    let l1 = if weights.lambda1 > 0.0 { l1_loss(pred, target)? } else { zero.clone() };
    let gan = if weights.lambda2 > 0.0 {
        let disc = disc.ok_or_else(|| Error::Config("adversarial weight is positive but no discriminator was given".into()))?;
        objective.generator(&disc.score(pred)?)?
    } else {
        zero.clone()
    };
    let perceptual = if weights.lambda3 > 0.0 { perceptual_loss(pred, target, extractor)? } else { zero.clone() };
    let style = if weights.lambda4 > 0.0 { style_loss(pred, target, extractor)? } else { zero.clone() };
    let total = l1
        .affine(weights.lambda1, 0.0)?
        .add(&gan.affine(weights.lambda2, 0.0)?)?
        .add(&perceptual.affine(weights.lambda3, 0.0)?)?
        .add(&style.affine(weights.lambda4, 0.0)?)?;
    Ok(LossTerms { l1, gan, perceptual, style, total })
}

pub fn complement_loss(
    pred: &Tensor,
    target: &Tensor,
    weights: &LossWeights,
    disc: Option<&dyn Scorer>,
    extractor: &dyn FeatureExtractor,
    objective: AdversarialObjective,
) -> Result<LossTerms> {
    weighted_objective(pred, target, weights, disc, extractor, objective)
}

/// Trust target `1 − clamp(mean_c |I* − Ĩ| / ρ, 0, 1)` as `(B, 1, H, W)`.
pub fn confidence_target(gt: &Tensor, complemented: &Tensor, residual_scale: f64) -> Result<Tensor> {
    same_shape(gt, complemented)?;
    if !(residual_scale > 0.0) {
        return Err(Error::Config(format!("residual scale must be positive, got {residual_scale}")));
    }
    let residual = gt.sub(complemented)?.abs()?.mean_keepdim(1)?;
    Ok(residual.affine(1.0 / residual_scale, 0.0)?.clamp(0.0, 1.0)?.affine(-1.0, 1.0)?)
}

/// Single-channel maps replicated to three channels.
pub fn replicate_channels(map: &Tensor) -> Result<Tensor> {
    let (_, c, _, _) = map.dims4()?;
    if c != 1 {
        bail_shape!("expected a single-channel map, got {c} channels");
    }
    Ok(Tensor::cat(&[map, map, map], 1)?)
}

/// The four-term objective on confidence maps `(B, 1, H, W)`.
pub fn confidence_loss(
    confidence: &Tensor,
    target: &Tensor,
    weights: &LossWeights,
    disc: Option<&dyn Scorer>,
    extractor: &dyn FeatureExtractor,
    objective: AdversarialObjective,
) -> Result<LossTerms> {
    same_shape(confidence, target)?;
    weighted_objective(&replicate_channels(confidence)?, &replicate_channels(target)?, weights, disc, extractor, objective)
}
