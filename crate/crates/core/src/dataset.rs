//! Street-scene pair dataset assembly: mask binning by missing ratio,
//! same-bin mask pairing, split manifests, sample loading, and a synthetic
//! source generator for running the pipeline without external data.
//!
//! Layout expected under an image root:
//!
//! ```text
//! <image_root>/<split>/<pair_id>/t1.{png,jpg}
//! <image_root>/<split>/<pair_id>/t2.{png,jpg}
//! ```
//!
//! Masks are single files in one directory. A manifest is a pretty-printed
//! JSON document (`manifest_<split>.json`, `format_version` 1) listing the
//! image pairs of a split and one record per mask pair.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use candle_core::{Device, Tensor};
use image::imageops::FilterType;
use image::{GrayImage, Luma, Rgb, RgbImage};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::complement::{Image, Mask, ScenePair};
use crate::error::{Error, Result};
use crate::training::PairSource;

pub const MANIFEST_VERSION: u32 = 1;
const IMAGE_EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];

/// Missing-ratio interval `[lo, hi)` in percent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct RatioBin {
    pub lo: u32,
    pub hi: u32,
}

impl RatioBin {
    pub const ALL: [RatioBin; 4] = [
        RatioBin { lo: 20, hi: 30 },
        RatioBin { lo: 30, hi: 40 },
        RatioBin { lo: 40, hi: 50 },
        RatioBin { lo: 50, hi: 60 },
    ];

    pub fn contains(&self, ratio: f64) -> bool {
        ratio >= self.lo as f64 / 100.0 && ratio < self.hi as f64 / 100.0
    }

    pub fn of_ratio(ratio: f64) -> Option<RatioBin> {
        Self::ALL.into_iter().find(|b| b.contains(ratio))
    }

    pub fn label(&self) -> String {
        format!("{}-{}", self.lo, self.hi)
    }
}

impl fmt::Display for RatioBin {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}-{}", self.lo, self.hi)
    }
}

impl std::str::FromStr for RatioBin {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim_end_matches('%');
        Self::ALL
            .into_iter()
            .find(|b| b.label() == s)
            .ok_or_else(|| Error::Validation(format!("unknown ratio bin {s:?}; expected one of 20-30, 30-40, 40-50, 50-60")))
    }
}

impl Serialize for RatioBin {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.label())
    }
}

impl<'de> Deserialize<'de> for RatioBin {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    fn index(self) -> u64 {
        self as u64
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Single-damage (intact reference) or duo-damage task.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
#[value(rename_all = "kebab-case")]
pub enum InpaintTask {
    TvRef,
    TvDuo,
}

impl fmt::Display for InpaintTask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            InpaintTask::TvRef => "tv-ref",
            InpaintTask::TvDuo => "tv-duo",
        })
    }
}

/// Which grayscale value marks a hole in mask files.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
#[value(rename_all = "kebab-case")]
pub enum MaskPolarity {
    HoleWhite,
    HoleBlack,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PreprocessSpec {
    pub resolution: usize,
    /// Threshold on grayscale mask values scaled to `[0, 1]`.
    pub mask_threshold: f64,
    pub mask_polarity: MaskPolarity,
}

impl Default for PreprocessSpec {
    fn default() -> Self {
        Self { resolution: 256, mask_threshold: 0.5, mask_polarity: MaskPolarity::HoleWhite }
    }
}

impl PreprocessSpec {
    pub fn validate(&self) -> Result<()> {
        if self.resolution == 0 {
            return Err(Error::Config("resolution must be positive".into()));
        }
        if !(self.mask_threshold > 0.0 && self.mask_threshold < 1.0) {
            return Err(Error::Config(format!("mask_threshold must lie in (0, 1), got {}", self.mask_threshold)));
        }
        Ok(())
    }

    fn is_hole(&self, gray: u8) -> bool {
        let bright = gray as f64 / 255.0 > self.mask_threshold;
        match self.mask_polarity {
            MaskPolarity::HoleWhite => bright,
            MaskPolarity::HoleBlack => !bright,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskRecord {
    /// File name relative to the mask root.
    pub source: String,
    /// Fraction of missing pixels at the file's native resolution.
    pub ratio: f64,
    pub bin: RatioBin,
}

pub type BinnedMasks = BTreeMap<RatioBin, Vec<MaskRecord>>;

/// Missing fraction of a grayscale mask file.
pub fn measure_mask(path: &Path, spec: &PreprocessSpec) -> Result<f64> {
    let img = image::open(path).map_err(|e| Error::image(path, e))?.to_luma8();
    let n = img.pixels().len();
    if n == 0 {
        return Err(Error::Validation(format!("{}: empty mask", path.display())));
    }
    let holes = img.pixels().filter(|p| spec.is_hole(p.0[0])).count();
    Ok(holes as f64 / n as f64)
}

/// Groups `(source, ratio)` measurements by bin; returns the bins and the
/// number of masks outside every bin.
pub fn bin_records(measured: impl IntoIterator<Item = (String, f64)>) -> (BinnedMasks, usize) {
    let mut bins: BinnedMasks = RatioBin::ALL.iter().map(|b| (*b, Vec::new())).collect();
    let mut excluded = 0;
    for (source, ratio) in measured {
        match RatioBin::of_ratio(ratio) {
            Some(bin) => bins.get_mut(&bin).expect("all bins present").push(MaskRecord { source, ratio, bin }),
            None => excluded += 1,
        }
    }
    (bins, excluded)
}

fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut out = Vec::new();
    for entry in entries {
        let p = entry.map_err(|e| Error::io(dir, e))?.path();
        let ext = p.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase());
        if p.is_file() && ext.is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.as_str())) {
            out.push(p);
        }
    }
    out.sort();
    Ok(out)
}

/// Measures every mask image in `mask_dir` and bins it.
pub fn bin_masks(mask_dir: &Path, spec: &PreprocessSpec) -> Result<BinnedMasks> {
    let files = list_images(mask_dir)?;
    if files.is_empty() {
        return Err(Error::Missing { what: "mask images", path: mask_dir.to_path_buf() });
    }
    let mut measured = Vec::with_capacity(files.len());
    for f in &files {
        let name = f.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string();
        measured.push((name, measure_mask(f, spec)?));
    }
    let (bins, excluded) = bin_records(measured);
    if excluded > 0 {
        log::info!("{excluded} of {} masks fall outside the 20-60% range and were skipped", files.len());
    }
    Ok(bins)
}

/// Image-pair and per-bin mask-pair counts for each split.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitSpec {
    pub train_images: usize,
    pub val_images: usize,
    pub test_images: usize,
    pub train_masks_per_bin: usize,
    pub val_masks_per_bin: usize,
    pub test_masks_per_bin: usize,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            train_images: 816,
            val_images: 256,
            test_images: 290,
            train_masks_per_bin: 1400,
            val_masks_per_bin: 200,
            test_masks_per_bin: 400,
        }
    }
}

impl SplitSpec {
    /// Every count multiplied by `fraction` and rounded, with at least one
    /// item per split and bin.
    pub fn scaled(&self, fraction: f64) -> Result<Self> {
        if !(fraction > 0.0 && fraction <= 1.0) {
            return Err(Error::Config(format!("subset fraction must lie in (0, 1], got {fraction}")));
        }
        let s = |n: usize| ((n as f64 * fraction).round() as usize).max(1);
        Ok(Self {
            train_images: s(self.train_images),
            val_images: s(self.val_images),
            test_images: s(self.test_images),
            train_masks_per_bin: s(self.train_masks_per_bin),
            val_masks_per_bin: s(self.val_masks_per_bin),
            test_masks_per_bin: s(self.test_masks_per_bin),
        })
    }

    pub fn images(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train_images,
            Split::Val => self.val_images,
            Split::Test => self.test_images,
        }
    }

    pub fn masks_per_bin(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train_masks_per_bin,
            Split::Val => self.val_masks_per_bin,
            Split::Test => self.test_masks_per_bin,
        }
    }
}

fn split_rng(seed: u64, split: Split, salt: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(split.index() * 16 + salt);
    rng
}

pub type MaskPairs = BTreeMap<RatioBin, Vec<[MaskRecord; 2]>>;

/// Random same-bin mask pairs for every split. Within a split the pool is
/// consumed in shuffled order and reshuffled when exhausted, so masks are
/// reused only when a bin holds fewer than twice the requested pairs.
pub fn pair_masks(bins: &BinnedMasks, spec: &SplitSpec, seed: u64) -> Result<BTreeMap<Split, MaskPairs>> {
    let mut out = BTreeMap::new();
    for split in Split::ALL {
        let n = spec.masks_per_bin(split);
        let mut per_bin = BTreeMap::new();
        for (i, bin) in RatioBin::ALL.iter().enumerate() {
            let pool = bins.get(bin).map(Vec::as_slice).unwrap_or_default();
            if pool.is_empty() {
                return Err(Error::Validation(format!("mask bin {bin}% is empty")));
            }
            if pool.len() < 2 * n {
                log::info!("{split} bin {bin}%: {} masks for {n} pairs, reusing masks", pool.len());
            }
            let mut rng = split_rng(seed, split, 1 + i as u64);
            let mut order: Vec<usize> = (0..pool.len()).collect();
            order.shuffle(&mut rng);
            let mut cursor = 0;
            let mut next = |rng: &mut ChaCha8Rng| {
                if cursor == order.len() {
                    order.shuffle(rng);
                    cursor = 0;
                }
                cursor += 1;
                pool[order[cursor - 1]].clone()
            };
            let pairs: Vec<[MaskRecord; 2]> = (0..n).map(|_| [next(&mut rng), next(&mut rng)]).collect();
            per_bin.insert(*bin, pairs);
        }
        out.insert(split, per_bin);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImagePairRef {
    pub id: String,
    /// Paths relative to the image root.
    pub t1: String,
    pub t2: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub id: String,
    pub image_pair: String,
    pub bin: RatioBin,
    pub masks: [MaskRecord; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub split: Split,
    pub seed: u64,
    pub synthetic: bool,
    pub image_root: String,
    pub mask_root: String,
    pub image_pairs: Vec<ImagePairRef>,
    pub records: Vec<ManifestRecord>,
    pub counts: BTreeMap<RatioBin, usize>,
}

fn find_capture(dir: &Path, stem: &str) -> Option<PathBuf> {
    IMAGE_EXTENSIONS.iter().map(|e| dir.join(format!("{stem}.{e}"))).find(|p| p.is_file())
}

/// Image pairs found under `<image_root>/<split>/`, sorted by id.
pub fn scan_image_pairs(image_root: &Path, split: Split) -> Result<Vec<ImagePairRef>> {
    let dir = image_root.join(split.name());
    if !dir.is_dir() {
        return Err(Error::Missing { what: "image split directory", path: dir });
    }
    let mut ids = Vec::new();
    for entry in std::fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))? {
        let p = entry.map_err(|e| Error::io(&dir, e))?.path();
        if p.is_dir() {
            ids.push(p);
        }
    }
    ids.sort();
    let mut out = Vec::with_capacity(ids.len());
    for p in ids {
        let id = p.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string();
        let (Some(t1), Some(t2)) = (find_capture(&p, "t1"), find_capture(&p, "t2")) else {
            return Err(Error::Missing { what: "t1/t2 capture pair", path: p });
        };
        let rel = |q: &Path| q.strip_prefix(image_root).unwrap_or(q).to_string_lossy().replace('\\', "/");
        out.push(ImagePairRef { id, t1: rel(&t1), t2: rel(&t2) });
    }
    Ok(out)
}

/// Selects the split's image pairs and joins them with its mask pairs: the
/// image pairs are shuffled under `seed` and assigned to mask pairs
/// cyclically.
pub fn build_manifest(
    image_root: &Path,
    mask_root: &Path,
    split: Split,
    mask_pairs: &MaskPairs,
    spec: &SplitSpec,
    seed: u64,
    synthetic: bool,
) -> Result<DatasetManifest> {
    let mut available = scan_image_pairs(image_root, split)?;
    let want = spec.images(split);
    if available.len() < want {
        return Err(Error::Validation(format!(
            "{split}: found {} image pairs under {}, need {want}",
            available.len(),
            image_root.display()
        )));
    }
    let mut rng = split_rng(seed, split, 0);
    if available.len() > want {
        available.shuffle(&mut rng);
        available.truncate(want);
        available.sort_by(|a, b| a.id.cmp(&b.id));
    }
    let mut order: Vec<usize> = (0..available.len()).collect();
    order.shuffle(&mut rng);
    let mut records = Vec::new();
    let mut counts = BTreeMap::new();
    for (bin, pairs) in mask_pairs {
        counts.insert(*bin, pairs.len());
        for masks in pairs {
            let k = records.len();
            records.push(ManifestRecord {
                id: format!("{split}-{k:05}"),
                image_pair: available[order[k % order.len()]].id.clone(),
                bin: *bin,
                masks: masks.clone(),
            });
        }
    }
    Ok(DatasetManifest {
        format_version: MANIFEST_VERSION,
        split,
        seed,
        synthetic,
        image_root: image_root.to_string_lossy().into_owned(),
        mask_root: mask_root.to_string_lossy().into_owned(),
        image_pairs: available,
        records,
        counts,
    })
}

fn root_from(root: &str, dir: &Path) -> Result<String> {
    let root = Path::new(root);
    if root.is_absolute() {
        return Ok(root.to_string_lossy().into_owned());
    }
    let (root, dir) = if dir.is_absolute() {
        (std::path::absolute(root).map_err(|e| Error::io(root, e))?, dir.to_path_buf())
    } else {
        (root.to_path_buf(), dir.to_path_buf())
    };
    let rel = pathdiff::diff_paths(&root, &dir).unwrap_or(root);
    Ok(rel.to_string_lossy().replace('\\', "/"))
}

impl DatasetManifest {
    pub fn file_name(split: Split) -> String {
        format!("manifest_{split}.json")
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    /// Relative roots are stored relative to `dir`, so the manifest directory
    /// can be read from any working directory.
    pub fn save(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(Self::file_name(self.split));
        let mut stored = self.clone();
        stored.image_root = root_from(&self.image_root, dir)?;
        stored.mask_root = root_from(&self.mask_root, dir)?;
        std::fs::write(&path, stored.to_json()?).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut m: Self = serde_json::from_str(&text)?;
        if m.format_version != MANIFEST_VERSION {
            return Err(Error::Validation(format!("{}: unsupported manifest version {}", path.display(), m.format_version)));
        }
        let dir = path.parent().unwrap_or(Path::new(""));
        for root in [&mut m.image_root, &mut m.mask_root] {
            if Path::new(root.as_str()).is_relative() {
                *root = dir.join(root.as_str()).to_string_lossy().replace('\\', "/");
            }
        }
        Ok(m)
    }

    pub fn load_split(dir: &Path, split: Split) -> Result<Self> {
        let path = dir.join(Self::file_name(split));
        if !path.is_file() {
            return Err(Error::Missing { what: "manifest", path });
        }
        Self::load(&path)
    }

    pub fn image_pair(&self, id: &str) -> Result<&ImagePairRef> {
        self.image_pairs
            .iter()
            .find(|p| p.id == id)
            .ok_or_else(|| Error::Validation(format!("manifest has no image pair {id}")))
    }

    /// Every referenced file that does not exist.
    pub fn missing_files(&self) -> Vec<PathBuf> {
        let mut out = Vec::new();
        let root = Path::new(&self.image_root);
        for p in &self.image_pairs {
            for rel in [&p.t1, &p.t2] {
                let f = root.join(rel);
                if !f.is_file() {
                    out.push(f);
                }
            }
        }
        for r in &self.records {
            for m in &r.masks {
                let f = Path::new(&self.mask_root).join(&m.source);
                if !f.is_file() && !out.contains(&f) {
                    out.push(f);
                }
            }
        }
        out
    }

    /// Distinct mask pairs per bin, as counted from the records.
    pub fn bin_counts(&self) -> BTreeMap<RatioBin, usize> {
        let mut c = BTreeMap::new();
        for r in &self.records {
            *c.entry(r.bin).or_insert(0) += 1;
        }
        c
    }
}

fn load_rgb(path: &Path, res: usize) -> Result<Image> {
    let img = image::open(path).map_err(|e| Error::image(path, e))?.to_rgb8();
    let img = if img.width() as usize != res || img.height() as usize != res {
        image::imageops::resize(&img, res as u32, res as u32, FilterType::Triangle)
    } else {
        img
    };
    let plane = res * res;
    let mut v = vec![0f32; 3 * plane];
    for (i, p) in img.pixels().enumerate() {
        for c in 0..3 {
            v[c * plane + i] = p.0[c] as f32 / 127.5 - 1.0;
        }
    }
    Image::from_vec(v, (3, res, res))
}

fn load_mask(path: &Path, spec: &PreprocessSpec) -> Result<Mask> {
    let res = spec.resolution;
    let img = image::open(path).map_err(|e| Error::image(path, e))?.to_luma8();
    let img = if img.width() as usize != res || img.height() as usize != res {
        image::imageops::resize(&img, res as u32, res as u32, FilterType::Nearest)
    } else {
        img
    };
    let known: Vec<bool> = img.pixels().map(|p| !spec.is_hole(p.0[0])).collect();
    Mask::from_bools(&known, (res, res))
}

/// Loads, resizes and normalizes one record. For the single-damage task the
/// first capture is kept intact.
pub fn load_sample(manifest: &DatasetManifest, record: &ManifestRecord, spec: &PreprocessSpec, task: InpaintTask) -> Result<ScenePair> {
    spec.validate()?;
    let pair = manifest.image_pair(&record.image_pair)?;
    let root = Path::new(&manifest.image_root);
    let gt_1 = load_rgb(&root.join(&pair.t1), spec.resolution)?;
    let gt_2 = load_rgb(&root.join(&pair.t2), spec.resolution)?;
    let mroot = Path::new(&manifest.mask_root);
    let mask_1 = match task {
        InpaintTask::TvRef => Mask::ones((spec.resolution, spec.resolution), candle_core::DType::F32)?,
        InpaintTask::TvDuo => load_mask(&mroot.join(&record.masks[0].source), spec)?,
    };
    let mask_2 = load_mask(&mroot.join(&record.masks[1].source), spec)?;
    ScenePair::new(gt_1, mask_1, gt_2, mask_2, format!("{}:{}", record.image_pair, record.bin))
}

/// Lazily loaded samples of a manifest.
pub struct ManifestSource {
    pub manifest: DatasetManifest,
    pub spec: PreprocessSpec,
    pub task: InpaintTask,
    /// Restricts the source to the first `limit` records.
    pub limit: Option<usize>,
}

impl PairSource for ManifestSource {
    fn len(&self) -> usize {
        let n = self.manifest.records.len();
        self.limit.map_or(n, |l| l.min(n))
    }

    fn pair(&self, index: usize) -> Result<ScenePair> {
        load_sample(&self.manifest, &self.manifest.records[index], &self.spec, self.task)
    }
}

// ---------------------------------------------------------------------------
// synthetic sources

fn lerp(a: [f32; 3], b: [f32; 3], t: f32) -> [f32; 3] {
    [a[0] + (b[0] - a[0]) * t, a[1] + (b[1] - a[1]) * t, a[2] + (b[2] - a[2]) * t]
}

fn to_rgb(c: [f32; 3]) -> Rgb<u8> {
    Rgb(c.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8))
}

struct Block {
    x0: usize,
    x1: usize,
    top: usize,
    color: [f32; 3],
    window: [f32; 3],
}

/// A street-like scene captured twice: sky, facades, road. The second
/// capture has different lighting, a recolored facade, a changed skyline
/// and a new foreground object.
pub fn synthetic_scene_pair(res: usize, seed: u64) -> (RgbImage, RgbImage) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = res as f32;
    let horizon = (r * rng.random_range(0.5..0.62)) as usize;
    let sky_top = [rng.random_range(0.2..0.4), rng.random_range(0.4..0.6), rng.random_range(0.7..0.95)];
    let sky_low = [rng.random_range(0.7..0.9), rng.random_range(0.75..0.9), rng.random_range(0.8..0.95)];
    let road = [rng.random_range(0.25..0.4); 3];
    let mut blocks = Vec::new();
    let mut x = 0usize;
    while x < res {
        let w = ((r * rng.random_range(0.12..0.3)) as usize).max(2);
        let top = (horizon as f32 - r * rng.random_range(0.15..0.45)).max(0.0) as usize;
        let base: [f32; 3] = [rng.random_range(0.3..0.85), rng.random_range(0.25..0.75), rng.random_range(0.2..0.7)];
        blocks.push(Block { x0: x, x1: (x + w).min(res), top, color: base, window: [rng.random_range(0.1..0.3); 3] });
        x += w;
    }
    let changed = rng.random_range(0..blocks.len());
    let new_color = [rng.random_range(0.2..0.9), rng.random_range(0.2..0.9), rng.random_range(0.2..0.9)];
    let new_top = (horizon as f32 - r * rng.random_range(0.1..0.5)).max(0.0) as usize;
    let gain: f32 = rng.random_range(0.65..0.9);
    let tint = [rng.random_range(0.95..1.1), rng.random_range(0.9..1.05), rng.random_range(0.85..1.0)];
    let car_w = (r * rng.random_range(0.15..0.3)) as usize;
    let car_h = (r * rng.random_range(0.06..0.12)) as usize;
    let car_x = rng.random_range(0..res.saturating_sub(car_w).max(1));
    let car_y = (horizon + (r * 0.1) as usize).min(res.saturating_sub(car_h + 1));
    let car_color = [rng.random_range(0.0..1.0), rng.random_range(0.0..0.5), rng.random_range(0.0..0.5)];
    let win = (r / 32.0).max(1.0) as usize;

    let render = |second: bool| -> RgbImage {
        let mut img = RgbImage::new(res as u32, res as u32);
        for py in 0..res {
            for px in 0..res {
                let mut c = if py < horizon {
                    lerp(sky_top, sky_low, py as f32 / horizon.max(1) as f32)
                } else {
                    let t = (py - horizon) as f32 / (res - horizon).max(1) as f32;
                    let mut g = lerp(road, [road[0] * 0.6; 3], t);
                    if (px as i64 - res as i64 / 2).abs() < (1 + (t * r / 40.0) as i64) && (py / (win * 3).max(1)) % 2 == 0 {
                        g = [0.9, 0.9, 0.8];
                    }
                    g
                };
                for (i, b) in blocks.iter().enumerate() {
                    let (top, color) = if second && i == changed { (new_top, new_color) } else { (b.top, b.color) };
                    if px >= b.x0 && px < b.x1 && py >= top && py < horizon {
                        c = color;
                        let lx = px - b.x0;
                        let ly = py - top;
                        if lx % (3 * win) >= win && ly % (3 * win) >= win && lx + win < b.x1 - b.x0 {
                            c = b.window;
                        }
                    }
                }
                if second && px >= car_x && px < car_x + car_w && py >= car_y && py < car_y + car_h {
                    c = car_color;
                }
                if second {
                    c = [c[0] * gain * tint[0], c[1] * gain * tint[1], c[2] * gain * tint[2]];
                }
                img.put_pixel(px as u32, py as u32, to_rgb(c));
            }
        }
        img
    };
    (render(false), render(true))
}

/// Irregular brush-stroke hole pattern whose missing ratio lies in `bin`.
/// Holes are returned as `true`.
pub fn synthetic_holes(res: usize, bin: RatioBin, rng: &mut ChaCha8Rng) -> Vec<bool> {
    let n = res * res;
    loop {
        let target = rng.random_range(bin.lo as f64 / 100.0 + 0.005..bin.hi as f64 / 100.0 - 0.02);
        let mut hole = vec![false; n];
        let mut count = 0usize;
        let r = res as f64;
        'strokes: loop {
            let (mut x, mut y) = (rng.random_range(0.0..r), rng.random_range(0.0..r));
            let mut angle: f64 = rng.random_range(0.0..std::f64::consts::TAU);
            let radius = (r * rng.random_range(0.015..0.045)).max(1.0);
            for _ in 0..rng.random_range(4..16) {
                angle += rng.random_range(-1.2..1.2);
                let len = r * rng.random_range(0.04..0.15);
                let steps = (len / (radius * 0.5)).ceil() as usize;
                for _ in 0..steps {
                    x = (x + angle.cos() * radius * 0.5).clamp(0.0, r - 1.0);
                    y = (y + angle.sin() * radius * 0.5).clamp(0.0, r - 1.0);
                    let (x0, x1) = ((x - radius).floor().max(0.0) as usize, ((x + radius).ceil() as usize).min(res - 1));
                    let (y0, y1) = ((y - radius).floor().max(0.0) as usize, ((y + radius).ceil() as usize).min(res - 1));
                    for yy in y0..=y1 {
                        for xx in x0..=x1 {
                            let d2 = (xx as f64 - x).powi(2) + (yy as f64 - y).powi(2);
                            if d2 <= radius * radius && !hole[yy * res + xx] {
                                hole[yy * res + xx] = true;
                                count += 1;
                            }
                        }
                    }
                    if count as f64 / n as f64 >= target {
                        break 'strokes;
                    }
                }
            }
        }
        if bin.contains(count as f64 / n as f64) {
            return hole;
        }
    }
}

/// Writes synthetic image pairs and masks under `root/images` and
/// `root/masks`; returns both directories.
pub fn generate_synthetic_sources(root: &Path, spec: &SplitSpec, resolution: usize, seed: u64) -> Result<(PathBuf, PathBuf)> {
    let images = root.join("images");
    let masks = root.join("masks");
    for split in Split::ALL {
        for k in 0..spec.images(split) {
            let dir = images.join(split.name()).join(format!("{split}_{k:04}"));
            std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            let (a, b) = synthetic_scene_pair(resolution, seed ^ (split.index() << 40) ^ (k as u64).wrapping_mul(0x9e37_79b9));
            for (img, name) in [(a, "t1.png"), (b, "t2.png")] {
                let p = dir.join(name);
                img.save(&p).map_err(|e| Error::image(&p, e))?;
            }
        }
    }
    std::fs::create_dir_all(&masks).map_err(|e| Error::io(&masks, e))?;
    let most = Split::ALL.iter().map(|s| spec.masks_per_bin(*s)).max().unwrap_or(1);
    let per_bin = (2 * most).clamp(8, 400);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(99);
    for bin in RatioBin::ALL {
        for k in 0..per_bin {
            let holes = synthetic_holes(resolution, bin, &mut rng);
            let img = GrayImage::from_fn(resolution as u32, resolution as u32, |x, y| {
                Luma([if holes[y as usize * resolution + x as usize] { 255 } else { 0 }])
            });
            let p = masks.join(format!("mask_{}_{k:04}.png", bin.lo));
            img.save(&p).map_err(|e| Error::image(&p, e))?;
        }
    }
    Ok((images, masks))
}

/// Converts an 8-bit RGB image to a `[-1, 1]` tensor image.
pub fn rgb_to_image(img: &RgbImage) -> Result<Image> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let plane = w * h;
    let mut v = vec![0f32; 3 * plane];
    for (i, p) in img.pixels().enumerate() {
        for c in 0..3 {
            v[c * plane + i] = p.0[c] as f32 / 127.5 - 1.0;
        }
    }
    Image::from_vec(v, (3, h, w))
}

/// A synthetic scene pair with synthetic holes drawn from `bin` on both
/// captures, built entirely in memory.
pub fn synthetic_pair(res: usize, bin: RatioBin, seed: u64) -> Result<ScenePair> {
    let (a, b) = synthetic_scene_pair(res, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let m1: Vec<bool> = synthetic_holes(res, bin, &mut rng).into_iter().map(|h| !h).collect();
    let m2: Vec<bool> = synthetic_holes(res, bin, &mut rng).into_iter().map(|h| !h).collect();
    ScenePair::new(rgb_to_image(&a)?, Mask::from_bools(&m1, (res, res))?, rgb_to_image(&b)?, Mask::from_bools(&m2, (res, res))?, format!("synthetic:{bin}"))
}

/// Quantizes a `[-1, 1]` image to 8-bit RGB. Single-channel images are
/// replicated across the three channels.
pub fn image_to_rgb(img: &Image) -> Result<RgbImage> {
    let (c, h, w) = img.dims();
    let v = img.to_vec()?;
    let plane = h * w;
    Ok(RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let i = y as usize * w + x as usize;
        let px = |ch: usize| (((v[ch.min(c - 1) * plane + i] + 1.0) * 127.5).round().clamp(0.0, 255.0)) as u8;
        Rgb([px(0), px(1), px(2)])
    }))
}

/// Writes a `[-1, 1]` image as an 8-bit RGB PNG (or any format chosen by
/// the extension).
pub fn save_image(img: &Image, path: &Path) -> Result<()> {
    let out = image_to_rgb(img)?;
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    out.save(path).map_err(|e| Error::image(path, e))
}

/// Reads an image written by [`save_image`].
pub fn read_image(path: &Path) -> Result<Image> {
    if !path.is_file() {
        return Err(Error::Missing { what: "image", path: path.to_path_buf() });
    }
    let img = image::open(path).map_err(|e| Error::image(path, e))?.to_rgb8();
    rgb_to_image(&img)
}

/// A `(1, H, W)` map in `[0, 1]` as a tensor image in `[-1, 1]`.
pub fn map_to_image(map: &Tensor) -> Result<Image> {
    let t = map.to_dtype(candle_core::DType::F32)?.affine(2.0, -1.0)?.clamp(-1.0, 1.0)?;
    Image::new(t.to_device(&Device::Cpu)?)
}
