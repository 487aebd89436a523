//! Image and mask conventions shared by every stage, mask algebra, and the
//! naive copy-paste complementation baseline.
//!
//! Images are channels-first `(C, H, W)` tensors with values in `[-1, 1]`.
//! Masks are `(1, H, W)` with `1 = known` and `0 = missing`; they broadcast
//! across image channels. Missing pixels of a damaged image are zero.

use candle_core::{DType, Device, Tensor};

use crate::error::{bail_shape, bail_validation, Result};

fn flat_f64(t: &Tensor) -> Result<Vec<f64>> {
    Ok(t.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?)
}

#[derive(Debug, Clone)]
pub struct Image {
    data: Tensor,
}

impl Image {
    /// Wraps a `(C, H, W)` tensor after checking that every value is finite
    /// and inside `[-1, 1]`.
    pub fn new(data: Tensor) -> Result<Self> {
        if data.rank() != 3 {
            bail_shape!("image must be (C, H, W), got {:?}", data.dims());
        }
        for v in flat_f64(&data)? {
            if !v.is_finite() {
                bail_validation!("image contains a non-finite value");
            }
            if !(-1.0..=1.0).contains(&v) {
                bail_validation!("image value {v} outside [-1, 1]");
            }
        }
        Ok(Self { data })
    }

    pub fn from_vec(values: Vec<f32>, (c, h, w): (usize, usize, usize)) -> Result<Self> {
        if values.len() != c * h * w {
            bail_shape!("{} values for a {c}x{h}x{w} image", values.len());
        }
        Self::new(Tensor::from_vec(values, (c, h, w), &Device::Cpu)?)
    }

    /// Clamps into `[-1, 1]` instead of rejecting out-of-range values.
    pub fn clamped(data: Tensor) -> Result<Self> {
        if data.rank() != 3 {
            bail_shape!("image must be (C, H, W), got {:?}", data.dims());
        }
        let data = data.clamp(-1.0, 1.0)?;
        if flat_f64(&data)?.iter().any(|v| !v.is_finite()) {
            bail_validation!("image contains a non-finite value");
        }
        Ok(Self { data })
    }

    pub(crate) fn from_tensor_unchecked(data: Tensor) -> Self {
        Self { data }
    }

    pub fn zeros((c, h, w): (usize, usize, usize), dtype: DType) -> Result<Self> {
        Ok(Self { data: Tensor::zeros((c, h, w), dtype, &Device::Cpu)? })
    }

    pub fn tensor(&self) -> &Tensor {
        &self.data
    }

    pub fn into_tensor(self) -> Tensor {
        self.data
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        let d = self.data.dims();
        (d[0], d[1], d[2])
    }

    pub fn to_vec(&self) -> Result<Vec<f64>> {
        flat_f64(&self.data)
    }

    pub fn to_dtype(&self, dtype: DType) -> Result<Self> {
        Ok(Self { data: self.data.to_dtype(dtype)? })
    }

    /// Adds a leading batch axis: `(1, C, H, W)`.
    pub fn batched(&self) -> Result<Tensor> {
        Ok(self.data.unsqueeze(0)?)
    }
}

#[derive(Debug, Clone)]
pub struct Mask {
    data: Tensor,
}

impl Mask {
    /// Wraps a `(1, H, W)` tensor whose values are exactly 0 or 1.
    pub fn new(data: Tensor) -> Result<Self> {
        if data.rank() != 3 || data.dims()[0] != 1 {
            bail_shape!("mask must be (1, H, W), got {:?}", data.dims());
        }
        if flat_f64(&data)?.iter().any(|&v| v != 0.0 && v != 1.0) {
            bail_validation!("mask is not binary");
        }
        Ok(Self { data })
    }

    pub fn from_bools(known: &[bool], (h, w): (usize, usize)) -> Result<Self> {
        if known.len() != h * w {
            bail_shape!("{} values for a {h}x{w} mask", known.len());
        }
        let v: Vec<f32> = known.iter().map(|&k| if k { 1.0 } else { 0.0 }).collect();
        Ok(Self { data: Tensor::from_vec(v, (1, h, w), &Device::Cpu)? })
    }

    pub fn from_vec(values: Vec<f32>, (h, w): (usize, usize)) -> Result<Self> {
        if values.len() != h * w {
            bail_shape!("{} values for a {h}x{w} mask", values.len());
        }
        Self::new(Tensor::from_vec(values, (1, h, w), &Device::Cpu)?)
    }

    pub(crate) fn from_tensor_unchecked(data: Tensor) -> Self {
        Self { data }
    }

    pub fn ones((h, w): (usize, usize), dtype: DType) -> Result<Self> {
        Ok(Self { data: Tensor::ones((1, h, w), dtype, &Device::Cpu)? })
    }

    pub fn zeros((h, w): (usize, usize), dtype: DType) -> Result<Self> {
        Ok(Self { data: Tensor::zeros((1, h, w), dtype, &Device::Cpu)? })
    }

    pub fn tensor(&self) -> &Tensor {
        &self.data
    }

    pub fn dims(&self) -> (usize, usize) {
        let d = self.data.dims();
        (d[1], d[2])
    }

    pub fn to_vec(&self) -> Result<Vec<f64>> {
        flat_f64(&self.data)
    }

    pub fn known(&self) -> Result<Vec<bool>> {
        Ok(self.to_vec()?.into_iter().map(|v| v == 1.0).collect())
    }

    pub fn to_dtype(&self, dtype: DType) -> Result<Self> {
        Ok(Self { data: self.data.to_dtype(dtype)? })
    }

    pub fn batched(&self) -> Result<Tensor> {
        Ok(self.data.unsqueeze(0)?)
    }
}

/// A time-variant image pair of one scene with its damage masks.
#[derive(Debug, Clone)]
pub struct ScenePair {
    pub gt_1: Image,
    pub gt_2: Image,
    pub damaged_1: Image,
    pub damaged_2: Image,
    pub mask_1: Mask,
    pub mask_2: Mask,
    /// Provenance label for the capture times; not used numerically.
    pub time_gap_tag: String,
}

impl ScenePair {
    /// Builds the pair from ground truth and masks, zero-filling missing pixels.
    pub fn new(gt_1: Image, mask_1: Mask, gt_2: Image, mask_2: Mask, tag: impl Into<String>) -> Result<Self> {
        let (c1, h1, w1) = gt_1.dims();
        let (c2, h2, w2) = gt_2.dims();
        if (c1, h1, w1) != (c2, h2, w2) || mask_1.dims() != (h1, w1) || mask_2.dims() != (h1, w1) {
            bail_shape!("scene pair members disagree on size");
        }
        let damaged_1 = apply_confidence(&gt_1, &mask_1)?;
        let damaged_2 = apply_confidence(&gt_2, &mask_2)?;
        Ok(Self { gt_1, gt_2, damaged_1, damaged_2, mask_1, mask_2, time_gap_tag: tag.into() })
    }

    /// The same pair with the two captures exchanged.
    pub fn swapped(&self) -> Self {
        Self {
            gt_1: self.gt_2.clone(),
            gt_2: self.gt_1.clone(),
            damaged_1: self.damaged_2.clone(),
            damaged_2: self.damaged_1.clone(),
            mask_1: self.mask_2.clone(),
            mask_2: self.mask_1.clone(),
            time_gap_tag: self.time_gap_tag.clone(),
        }
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        self.gt_1.dims()
    }
}

fn same_mask_shape(a: &Mask, b: &Mask) -> Result<()> {
    if a.dims() != b.dims() {
        bail_shape!("masks {:?} and {:?}", a.dims(), b.dims());
    }
    Ok(())
}

fn image_mask_shape(img: &Image, m: &Mask) -> Result<()> {
    let (_, h, w) = img.dims();
    if m.dims() != (h, w) {
        bail_shape!("image {:?} against mask {:?}", img.dims(), m.dims());
    }
    Ok(())
}

pub fn invert_mask(m: &Mask) -> Result<Mask> {
    Ok(Mask::from_tensor_unchecked(m.tensor().affine(-1.0, 1.0)?))
}

/// Fraction of missing pixels.
pub fn mask_ratio(m: &Mask) -> Result<f64> {
    let v = m.to_vec()?;
    if v.is_empty() {
        bail_validation!("empty mask");
    }
    let missing = v.iter().filter(|&&x| x == 0.0).count();
    Ok(missing as f64 / v.len() as f64)
}

/// `Ĩ1 = I1 + I2·(1−M1)`, `Ĩ2 = I2 + I1·(1−M2)` on zero-filled inputs.
pub fn naive_complement(i1: &Image, m1: &Mask, i2: &Image, m2: &Mask) -> Result<(Image, Image)> {
    if i1.dims() != i2.dims() {
        bail_shape!("images {:?} and {:?}", i1.dims(), i2.dims());
    }
    image_mask_shape(i1, m1)?;
    image_mask_shape(i2, m2)?;
    let hole_1 = invert_mask(m1)?;
    let hole_2 = invert_mask(m2)?;
    let c1 = i1.tensor().add(&i2.tensor().broadcast_mul(hole_1.tensor())?)?;
    let c2 = i2.tensor().add(&i1.tensor().broadcast_mul(hole_2.tensor())?)?;
    Ok((Image::from_tensor_unchecked(c1), Image::from_tensor_unchecked(c2)))
}

/// Hadamard product of an image with a (channel-broadcast) binary mask.
pub fn apply_confidence(img: &Image, c: &Mask) -> Result<Image> {
    image_mask_shape(img, c)?;
    Ok(Image::from_tensor_unchecked(img.tensor().broadcast_mul(c.tensor())?))
}

pub fn mask_intersection(m1: &Mask, m2: &Mask) -> Result<Mask> {
    same_mask_shape(m1, m2)?;
    Ok(Mask::from_tensor_unchecked(m1.tensor().mul(m2.tensor())?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_mask(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Mask {
        let bits: Vec<bool> = (0..h * w).map(|_| rng.random_bool(0.5)).collect();
        Mask::from_bools(&bits, (h, w)).unwrap()
    }

    fn random_image(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> Image {
        let v: Vec<f32> = (0..c * h * w).map(|_| rng.random_range(-1.0..=1.0)).collect();
        Image::from_vec(v, (c, h, w)).unwrap()
    }

    #[test]
    fn rejects_non_binary_mask_and_out_of_range_image() {
        assert!(Mask::from_vec(vec![0.0, 0.5, 1.0, 1.0], (2, 2)).is_err());
        assert!(Image::from_vec(vec![0.0, 1.5, 0.0, 0.0], (1, 2, 2)).is_err());
        assert!(Image::from_vec(vec![0.0, f32::NAN, 0.0, 0.0], (1, 2, 2)).is_err());
    }

    #[test]
    fn invert_full_mask() {
        let m = Mask::ones((3, 3), DType::F32).unwrap();
        assert!(invert_mask(&m).unwrap().to_vec().unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn invert_counts_ones() {
        let mut bits = [false; 16];
        for i in [0, 3, 7, 8, 15] {
            bits[i] = true;
        }
        let m = Mask::from_bools(&bits, (4, 4)).unwrap();
        let inv = invert_mask(&m).unwrap().to_vec().unwrap();
        let ones = inv.iter().filter(|&&v| v == 1.0).count();
        assert_eq!(ones, 11);
    }

    #[test]
    fn ratio_examples() {
        assert_eq!(mask_ratio(&Mask::ones((4, 4), DType::F32).unwrap()).unwrap(), 0.0);
        assert_eq!(mask_ratio(&Mask::zeros((4, 4), DType::F32).unwrap()).unwrap(), 1.0);
        let bits: Vec<bool> = (0..16).map(|i| i % 4 != 0).collect();
        let m = Mask::from_bools(&bits, (4, 4)).unwrap();
        assert_eq!(mask_ratio(&m).unwrap(), 0.25);
        let empty = Mask::from_tensor_unchecked(Tensor::zeros((1, 0, 0), DType::F32, &Device::Cpu).unwrap());
        assert!(mask_ratio(&empty).is_err());
    }

    #[test]
    fn naive_complement_reductions() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let i1 = random_image(&mut rng, 3, 4, 4);
        let i2 = random_image(&mut rng, 3, 4, 4);
        let ones = Mask::ones((4, 4), DType::F32).unwrap();
        let zeros = Mask::zeros((4, 4), DType::F32).unwrap();
        let (c1, _) = naive_complement(&i1, &ones, &i2, &ones).unwrap();
        assert_eq!(c1.to_vec().unwrap(), i1.to_vec().unwrap());
        let blank = Image::zeros((3, 4, 4), DType::F32).unwrap();
        let (c1, _) = naive_complement(&blank, &zeros, &i2, &ones).unwrap();
        assert_eq!(c1.to_vec().unwrap(), i2.to_vec().unwrap());
    }

    #[test]
    fn naive_complement_matches_select_oracle() {
        let gt1 = [0.5f32, -0.25, 0.75, 0.1];
        let gt2 = [-0.5f32, 0.3, -0.9, 0.6];
        let m1 = [true, false, false, true];
        let m2 = [false, true, false, true];
        let zero_fill = |g: &[f32; 4], m: &[bool; 4]| -> Vec<f32> {
            g.iter().zip(m).map(|(&v, &k)| if k { v } else { 0.0 }).collect()
        };
        let i1 = Image::from_vec(zero_fill(&gt1, &m1), (1, 2, 2)).unwrap();
        let i2 = Image::from_vec(zero_fill(&gt2, &m2), (1, 2, 2)).unwrap();
        let mk1 = Mask::from_bools(&m1, (2, 2)).unwrap();
        let mk2 = Mask::from_bools(&m2, (2, 2)).unwrap();
        let (c1, c2) = naive_complement(&i1, &mk1, &i2, &mk2).unwrap();
        let oracle = |a: &[f32; 4], ma: &[bool; 4], b: &[f32; 4], mb: &[bool; 4]| -> Vec<f64> {
            (0..4)
                .map(|p| if ma[p] { a[p] as f64 } else if mb[p] { b[p] as f64 } else { 0.0 })
                .collect()
        };
        assert_eq!(c1.to_vec().unwrap(), oracle(&gt1, &m1, &gt2, &m2));
        assert_eq!(c2.to_vec().unwrap(), oracle(&gt2, &m2, &gt1, &m1));
    }

    #[test]
    fn confidence_and_intersection_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let img = random_image(&mut rng, 3, 4, 4);
        let ones = Mask::ones((4, 4), DType::F32).unwrap();
        let zeros = Mask::zeros((4, 4), DType::F32).unwrap();
        assert_eq!(apply_confidence(&img, &ones).unwrap().to_vec().unwrap(), img.to_vec().unwrap());
        assert!(apply_confidence(&img, &zeros).unwrap().to_vec().unwrap().iter().all(|&v| v == 0.0));

        let c = random_mask(&mut rng, 4, 4);
        let got = apply_confidence(&img, &c).unwrap().to_vec().unwrap();
        let iv = img.to_vec().unwrap();
        let cv = c.to_vec().unwrap();
        for (k, g) in got.iter().enumerate() {
            assert_eq!(*g, iv[k] * cv[k % 16]);
        }

        let a = random_mask(&mut rng, 4, 4);
        let b = random_mask(&mut rng, 4, 4);
        assert_eq!(mask_intersection(&a, &ones).unwrap().to_vec().unwrap(), a.to_vec().unwrap());
        assert!(mask_intersection(&a, &zeros).unwrap().to_vec().unwrap().iter().all(|&v| v == 0.0));
        let and: Vec<f64> = a
            .known()
            .unwrap()
            .iter()
            .zip(b.known().unwrap())
            .map(|(&x, y)| if x && y { 1.0 } else { 0.0 })
            .collect();
        assert_eq!(mask_intersection(&a, &b).unwrap().to_vec().unwrap(), and);
    }

    #[test]
    fn shape_mismatches_are_errors() {
        let a = Mask::ones((4, 4), DType::F32).unwrap();
        let b = Mask::ones((4, 5), DType::F32).unwrap();
        assert!(mask_intersection(&a, &b).is_err());
        let img = Image::zeros((3, 4, 5), DType::F32).unwrap();
        assert!(apply_confidence(&img, &a).is_err());
        let img4 = Image::zeros((3, 4, 4), DType::F32).unwrap();
        assert!(naive_complement(&img4, &a, &img, &b).is_err());
    }

    proptest! {
        #[test]
        fn mask_algebra_invariants(seed in any::<u64>(), h in 1usize..6, w in 1usize..6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m = random_mask(&mut rng, h, w);
            let inv = invert_mask(&m).unwrap();
            prop_assert_eq!(invert_mask(&inv).unwrap().to_vec().unwrap(), m.to_vec().unwrap());
            let r = mask_ratio(&m).unwrap();
            prop_assert!((mask_ratio(&inv).unwrap() - (1.0 - r)).abs() < 1e-12);

            let img = random_image(&mut rng, 3, h, w);
            let once = apply_confidence(&img, &m).unwrap();
            let twice = apply_confidence(&once, &m).unwrap();
            prop_assert_eq!(once.to_vec().unwrap(), twice.to_vec().unwrap());
        }

        #[test]
        fn naive_complement_pixel_membership(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (h, w) = (3, 4);
            let m1 = random_mask(&mut rng, h, w);
            let m2 = random_mask(&mut rng, h, w);
            let i1 = apply_confidence(&random_image(&mut rng, 1, h, w), &m1).unwrap();
            let i2 = apply_confidence(&random_image(&mut rng, 1, h, w), &m2).unwrap();
            let (c1, _) = naive_complement(&i1, &m1, &i2, &m2).unwrap();
            let (a, b, c) = (i1.to_vec().unwrap(), i2.to_vec().unwrap(), c1.to_vec().unwrap());
            for p in 0..h * w {
                prop_assert!(c[p] == a[p] || c[p] == b[p] || c[p] == 0.0);
            }
            let ones = Mask::ones((h, w), DType::F32).unwrap();
            let (once, _) = naive_complement(&i1, &ones, &i2, &m2).unwrap();
            let (twice, _) = naive_complement(&once, &ones, &i2, &m2).unwrap();
            prop_assert_eq!(once.to_vec().unwrap(), twice.to_vec().unwrap());
        }
    }
}
