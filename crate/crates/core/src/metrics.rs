//! Restoration metrics and per-bin, per-branch report tables.
//!
//! PSNR is measured on the `[-1, 1]` representation with peak-to-peak range
//! 2, which equals PSNR on `[0, 1]` with range 1. SSIM maps inputs to
//! `[0, 1]` and averages the local index over all valid 11×11 Gaussian
//! windows (σ = 1.5) and channels.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::complement::Image;
use crate::dataset::{InpaintTask, RatioBin};
use crate::error::{bail_shape, Result};
use crate::features::FeatureExtractor;

pub const VALUE_RANGE: f64 = 2.0;
pub const PSNR_CAP: f64 = 100.0;

fn same_dims(a: &Image, b: &Image) -> Result<()> {
    if a.dims() != b.dims() {
        bail_shape!("metric inputs differ in shape: {:?} vs {:?}", a.dims(), b.dims());
    }
    Ok(())
}

/// PSNR of two equally long value slices for peak-to-peak `range`.
pub fn psnr_values(a: &[f64], b: &[f64], range: f64) -> f64 {
    let mse = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len().max(1) as f64;
    if mse < 1e-12 {
        PSNR_CAP
    } else {
        (10.0 * (range * range / mse).log10()).min(PSNR_CAP)
    }
}

pub fn psnr(pred: &Image, target: &Image) -> Result<f64> {
    same_dims(pred, target)?;
    Ok(psnr_values(&pred.to_vec()?, &target.to_vec()?, VALUE_RANGE))
}

pub fn l1_metric(pred: &Image, target: &Image) -> Result<f64> {
    same_dims(pred, target)?;
    let (a, b) = (pred.to_vec()?, target.to_vec()?);
    Ok(a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SsimParams {
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
}

impl Default for SsimParams {
    fn default() -> Self {
        Self { window: 11, sigma: 1.5, k1: 0.01, k2: 0.03 }
    }
}

fn gaussian_window(n: usize, sigma: f64) -> Vec<f64> {
    let c = (n as f64 - 1.0) / 2.0;
    let g: Vec<f64> = (0..n).map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Valid separable filtering of an `h × w` plane.
fn filter_valid(x: &[f64], h: usize, w: usize, g: &[f64]) -> Vec<f64> {
    let n = g.len();
    let (oh, ow) = (h - n + 1, w - n + 1);
    let mut rows = vec![0.0; h * ow];
    for r in 0..h {
        for c in 0..ow {
            rows[r * ow + c] = (0..n).map(|k| g[k] * x[r * w + c + k]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for r in 0..oh {
        for c in 0..ow {
            out[r * ow + c] = (0..n).map(|k| g[k] * rows[(r + k) * ow + c]).sum();
        }
    }
    out
}

pub fn ssim(pred: &Image, target: &Image) -> Result<f64> {
    ssim_with(pred, target, &SsimParams::default())
}

pub fn ssim_with(pred: &Image, target: &Image, p: &SsimParams) -> Result<f64> {
    same_dims(pred, target)?;
    let (c, h, w) = pred.dims();
    if h < p.window || w < p.window {
        bail_shape!("image {h}x{w} is smaller than the {0}x{0} SSIM window", p.window);
    }
    let g = gaussian_window(p.window, p.sigma);
    let c1 = (p.k1 * 1.0).powi(2);
    let c2 = (p.k2 * 1.0).powi(2);
    let to_unit = |v: Vec<f64>| -> Vec<f64> { v.into_iter().map(|x| (x + 1.0) / 2.0).collect() };
    let (a, b) = (to_unit(pred.to_vec()?), to_unit(target.to_vec()?));
    let plane = h * w;
    let mut total = 0.0;
    let mut count = 0usize;
    for ch in 0..c {
        let x = &a[ch * plane..(ch + 1) * plane];
        let y = &b[ch * plane..(ch + 1) * plane];
        let prod = |u: &[f64], v: &[f64]| -> Vec<f64> { u.iter().zip(v).map(|(p, q)| p * q).collect() };
        let mx = filter_valid(x, h, w, &g);
        let my = filter_valid(y, h, w, &g);
        let sxx = filter_valid(&prod(x, x), h, w, &g);
        let syy = filter_valid(&prod(y, y), h, w, &g);
        let sxy = filter_valid(&prod(x, y), h, w, &g);
        for i in 0..mx.len() {
            let (ux, uy) = (mx[i], my[i]);
            let vx = sxx[i] - ux * ux;
            let vy = syy[i] - uy * uy;
            let cov = sxy[i] - ux * uy;
            total += ((2.0 * ux * uy + c1) * (2.0 * cov + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2));
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// Learned-feature distance: per level, features are normalized to unit
/// length along channels, squared differences are summed over channels and
/// averaged over positions; levels are summed.
pub fn perceptual_distance(pred: &Image, target: &Image, extractor: &dyn FeatureExtractor) -> Result<f64> {
    same_dims(pred, target)?;
    let x = Tensor::stack(&[pred.tensor().to_dtype(DType::F32)?, target.tensor().to_dtype(DType::F32)?], 0)?;
    let mut total = 0.0;
    for f in extractor.features(&x)? {
        let f = f.to_dtype(DType::F64)?;
        let norm = f.sqr()?.sum_keepdim(1)?.sqrt()?.affine(1.0, 1e-10)?;
        let f = f.broadcast_div(&norm)?;
        let d = f.get(0)?.sub(&f.get(1)?)?.sqr()?.sum(0)?.mean_all()?;
        total += d.to_scalar::<f64>()?;
    }
    Ok(total)
}

/// One evaluated scene pair: predictions and ground truth per branch.
#[derive(Debug, Clone)]
pub struct EvalItem {
    pub id: String,
    pub bin: RatioBin,
    pub predictions: [Image; 2],
    pub targets: [Image; 2],
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct SampleScores {
    pub psnr: f64,
    pub ssim: f64,
    pub l1: f64,
    pub perceptual: f64,
}

pub fn score_pair(pred: &Image, target: &Image, extractor: &dyn FeatureExtractor) -> Result<SampleScores> {
    Ok(SampleScores {
        psnr: psnr(pred, target)?,
        ssim: ssim(pred, target)?,
        l1: l1_metric(pred, target)?,
        perceptual: perceptual_distance(pred, target, extractor)?,
    })
}

/// Means over the samples of one (bin, branch) cell; `None` when empty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricCell {
    pub bin: RatioBin,
    pub branch: usize,
    pub count: usize,
    pub psnr: Option<f64>,
    pub ssim: Option<f64>,
    pub l1: Option<f64>,
    pub perceptual: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub method: String,
    pub task: InpaintTask,
    pub cells: Vec<MetricCell>,
}

/// Branches scored for a task: the reference of a single-damage pair is
/// intact, so only the target (branch 2) is reported.
pub fn reported_branches(task: InpaintTask) -> &'static [usize] {
    match task {
        InpaintTask::TvRef => &[2],
        InpaintTask::TvDuo => &[1, 2],
    }
}

pub fn evaluate_suite(items: &[EvalItem], task: InpaintTask, method: &str, extractor: &dyn FeatureExtractor) -> Result<MetricReport> {
    let branches = reported_branches(task);
    let mut sums: BTreeMap<(RatioBin, usize), (usize, SampleScores)> = BTreeMap::new();
    for item in items {
        for &b in branches {
            let s = score_pair(&item.predictions[b - 1], &item.targets[b - 1], extractor)?;
            let e = sums.entry((item.bin, b)).or_default();
            e.0 += 1;
            e.1.psnr += s.psnr;
            e.1.ssim += s.ssim;
            e.1.l1 += s.l1;
            e.1.perceptual += s.perceptual;
        }
    }
    let mut cells = Vec::new();
    for bin in RatioBin::ALL {
        for &b in branches {
            let (n, s) = sums.get(&(bin, b)).copied().unwrap_or_default();
            let mean = |v: f64| if n == 0 { None } else { Some(v / n as f64) };
            cells.push(MetricCell {
                bin,
                branch: b,
                count: n,
                psnr: mean(s.psnr),
                ssim: mean(s.ssim),
                l1: mean(s.l1),
                perceptual: mean(s.perceptual),
            });
        }
    }
    Ok(MetricReport { method: method.to_string(), task, cells })
}

impl MetricReport {
    pub fn cell(&self, bin: RatioBin, branch: usize) -> Option<&MetricCell> {
        self.cells.iter().find(|c| c.bin == bin && c.branch == branch)
    }

    /// Sample-weighted means over all cells.
    pub fn overall(&self) -> SampleScores {
        let mut s = SampleScores::default();
        let mut n = 0usize;
        for c in &self.cells {
            if c.count == 0 {
                continue;
            }
            let k = c.count as f64;
            s.psnr += c.psnr.unwrap_or(0.0) * k;
            s.ssim += c.ssim.unwrap_or(0.0) * k;
            s.l1 += c.l1.unwrap_or(0.0) * k;
            s.perceptual += c.perceptual.unwrap_or(0.0) * k;
            n += c.count;
        }
        if n > 0 {
            let k = n as f64;
            s = SampleScores { psnr: s.psnr / k, ssim: s.ssim / k, l1: s.l1 / k, perceptual: s.perceptual / k };
        }
        s
    }

    /// Text table with one row per mask-ratio bin and a column group per
    /// reported branch.
    pub fn to_table(&self) -> String {
        let branches = reported_branches(self.task);
        let mut out = String::new();
        let _ = writeln!(out, "method: {}  task: {}", self.method, self.task);
        let mut header = format!("{:<8}", "ratio");
        for b in branches {
            let _ = write!(header, " | {:>8} {:>7} {:>7} {:>7}", format!("I{b} PSNR"), "SSIM", "L1", "PD");
        }
        let _ = writeln!(out, "{header}");
        let _ = writeln!(out, "{}", "-".repeat(header.chars().count()));
        let fmt = |v: Option<f64>, prec: usize, width: usize| match v {
            Some(x) => format!("{x:>width$.prec$}"),
            None => format!("{:>width$}", "-"),
        };
        for bin in RatioBin::ALL {
            let mut row = format!("{:<8}", format!("{}%", bin.label()));
            for &b in branches {
                if let Some(c) = self.cell(bin, b) {
                    let _ = write!(row, " | {} {} {} {}", fmt(c.psnr, 2, 8), fmt(c.ssim, 4, 7), fmt(c.l1, 4, 7), fmt(c.perceptual, 4, 7));
                }
            }
            let _ = writeln!(out, "{row}");
        }
        out
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }
}
