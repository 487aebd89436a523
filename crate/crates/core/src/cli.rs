//! The `tamp` command line: run configuration, the five subcommands and the
//! files they write.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use candle_core::DType;
use clap::{Args, Parser, Subcommand, ValueEnum};
use image::RgbImage;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::complement::{Image, ScenePair};
use crate::dataset::{
    bin_masks, build_manifest, generate_synthetic_sources, image_to_rgb, load_sample, map_to_image, pair_masks, read_image,
    save_image, DatasetManifest, InpaintTask, ManifestRecord, ManifestSource, PreprocessSpec, Split, SplitSpec,
};
use crate::diffusion::denoiser::{train_denoiser, DenoiserTrainConfig};
use crate::diffusion::sampler::branch_inputs;
use crate::diffusion::{sample_duo, DenoiserConfig, DiffusionConfig, SamplerConfig, SamplerMode, TinyUnet};
use crate::error::{Error, Result};
use crate::features::RandomPyramid;
use crate::indite::{BackboneConfig, ComplementResult, Indite};
use crate::metrics::{evaluate_suite, EvalItem, MetricReport, SampleScores};
use crate::training::trainer::LAST_CHECKPOINT;
use crate::training::{LossWeights, TrainConfig, Trainer};

pub const RESOLVED_CONFIG: &str = "resolved_config.toml";
pub const DATA_ROOT_ENV: &str = "TAMP_DATA_ROOT";
pub const DENOISER_CHECKPOINT: &str = "denoiser.safetensors";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PathsConfig {
    /// Directory holding `images/` and `masks/`.
    pub data_root: Option<PathBuf>,
    pub image_root: Option<PathBuf>,
    pub mask_root: Option<PathBuf>,
    pub manifest_dir: PathBuf,
    /// Parent of the per-command default output directories.
    pub run_dir: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            data_root: None,
            image_root: None,
            mask_root: None,
            manifest_dir: PathBuf::from("runs/manifests"),
            run_dir: PathBuf::from("runs"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    /// Fraction of every split and bin count to keep.
    pub subset: f64,
    pub synthetic: bool,
    pub task: InpaintTask,
    pub splits: SplitSpec,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self { subset: 1.0, synthetic: false, task: InpaintTask::TvDuo, splits: SplitSpec::default() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Table,
    Json,
    #[default]
    Both,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub format: ReportFormat,
}

/// Every tunable of a run. Loaded from TOML, overridden by flags, and
/// archived as `resolved_config.toml` next to each command's outputs. The
/// top-level `seed` drives every random stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub paths: PathsConfig,
    pub preprocess: PreprocessSpec,
    pub dataset: DatasetConfig,
    pub backbone: BackboneConfig,
    pub train: TrainConfig,
    pub loss: LossWeights,
    pub sampler: SamplerConfig,
    pub diffusion: DiffusionConfig,
    pub denoiser: DenoiserConfig,
    pub denoiser_train: DenoiserTrainConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        if !path.is_file() {
            return Err(Error::Missing { what: "config file", path: path.to_path_buf() });
        }
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| {
            let line = e.span().map(|s| text[..s.start].matches('\n').count() + 1).unwrap_or(1);
            Error::Config(format!("{} line {line}: {}", path.display(), e.message().trim()))
        })
    }

    /// Propagates the shared seed and resolution into the sections that
    /// carry their own copies, then validates everything.
    pub fn resolve(&mut self) -> Result<()> {
        self.train.seed = self.seed;
        self.sampler.seed = self.seed;
        self.denoiser_train.seed = self.seed;
        self.train.resolution = self.preprocess.resolution;
        self.backbone.input_resolution = self.preprocess.resolution;
        self.preprocess.validate()?;
        self.backbone.validate()?;
        self.train.validate()?;
        self.loss.validate()?;
        self.sampler.validate()?;
        self.diffusion.schedule()?;
        if !(self.dataset.subset > 0.0 && self.dataset.subset <= 1.0) {
            return Err(Error::Config(format!("dataset.subset must lie in (0, 1], got {}", self.dataset.subset)));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    /// Writes the resolved configuration into `dir`.
    pub fn archive(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(RESOLVED_CONFIG);
        std::fs::write(&path, self.to_toml()?).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    fn out_dir(&self, flag: &Option<PathBuf>, command: &str) -> PathBuf {
        flag.clone().unwrap_or_else(|| self.paths.run_dir.join(command))
    }
}

#[derive(Debug, Parser)]
#[command(name = "tamp", version, about = "Time-variant duo-image inpainting: dataset assembly, training, guided sampling and evaluation")]
pub struct Cli {
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    /// Seed for every random stream of the run.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Working resolution (square).
    #[arg(long, global = true)]
    pub res: Option<usize>,

    /// Directory of the dataset manifests.
    #[arg(long, global = true, value_name = "DIR")]
    pub manifest_dir: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Bin masks, pair them and write train/val/test manifests.
    BuildDataset(BuildDatasetArgs),
    /// Train the complementation network or the diffusion denoiser.
    Train(TrainArgs),
    /// Inpaint manifest records with the guided diffusion sampler.
    Sample(SampleArgs),
    /// Score sampler outputs against ground truth.
    Evaluate(EvaluateArgs),
    /// Run every sampler variant plus the network alone on one subset.
    Ablate(AblateArgs),
}

#[derive(Debug, Args)]
pub struct BuildDatasetArgs {
    /// Generate procedural scenes and masks instead of reading sources.
    #[arg(long)]
    pub synthetic: bool,

    /// Keep this fraction of every split and bin count.
    #[arg(long, value_name = "FRACTION")]
    pub subset: Option<f64>,

    /// Directory holding `images/` and `masks/`.
    #[arg(long, env = DATA_ROOT_ENV, value_name = "DIR")]
    pub data_root: Option<PathBuf>,

    /// Image root with `<split>/<pair>/t1.*` and `t2.*` (overrides the data root).
    #[arg(long, value_name = "DIR")]
    pub image_root: Option<PathBuf>,

    /// Directory of mask images (overrides the data root).
    #[arg(long, value_name = "DIR")]
    pub mask_root: Option<PathBuf>,

    /// Output directory for the manifests (defaults to the manifest dir).
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModelKind {
    Indite,
    Denoiser,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long, value_enum, default_value_t = ModelKind::Indite)]
    pub model: ModelKind,

    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,

    #[arg(long)]
    pub epochs: Option<usize>,

    /// Step budget (the denoiser's total step count).
    #[arg(long)]
    pub steps: Option<usize>,

    #[arg(long)]
    pub batch_size: Option<usize>,

    #[arg(long)]
    pub lr: Option<f64>,

    #[arg(long)]
    pub eval_every: Option<usize>,

    #[arg(long, allow_hyphen_values = true)]
    pub lambda1: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    pub lambda2: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    pub lambda3: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    pub lambda4: Option<f64>,

    /// Train and validate on the first training record only.
    #[arg(long)]
    pub overfit_one: bool,

    /// Continue from `<out>/last.safetensors`.
    #[arg(long)]
    pub resume: bool,

    /// Use only the first N training records.
    #[arg(long)]
    pub limit: Option<usize>,

    /// Use only the first N validation records.
    #[arg(long)]
    pub val_limit: Option<usize>,

    #[arg(long, value_enum)]
    pub task: Option<InpaintTask>,
}

#[derive(Debug, Args, Clone)]
pub struct SamplingArgs {
    /// Denoiser weights written by `train --model denoiser`.
    #[arg(long, value_name = "FILE")]
    pub denoiser: PathBuf,

    /// Number of reverse steps.
    #[arg(long)]
    pub steps: Option<usize>,

    /// Guidance weight.
    #[arg(long)]
    pub omega: Option<f64>,

    /// Low-pass downsampling factor.
    #[arg(long)]
    pub lowpass: Option<usize>,

    #[arg(long, value_enum, default_value_t = Split::Test)]
    pub split: Split,

    /// Use only the first N records of the split.
    #[arg(long)]
    pub limit: Option<usize>,

    #[arg(long, value_enum)]
    pub task: Option<InpaintTask>,

    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    #[arg(long, value_enum)]
    pub mode: Option<SamplerMode>,

    /// Network checkpoint, required by the indite-* modes.
    #[arg(long, value_name = "FILE")]
    pub checkpoint: Option<PathBuf>,

    /// Write per-step residuals and guidance norms to `trace.jsonl`.
    #[arg(long)]
    pub trace: bool,

    #[command(flatten)]
    pub sampling: SamplingArgs,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Directory with `<record>/out_1.png` and `out_2.png`.
    #[arg(long, value_name = "DIR")]
    pub outputs: PathBuf,

    #[arg(long, value_enum, default_value_t = Split::Test)]
    pub split: Split,

    #[arg(long)]
    pub limit: Option<usize>,

    #[arg(long, value_enum)]
    pub task: Option<InpaintTask>,

    /// Row label (defaults to the outputs directory name).
    #[arg(long)]
    pub method: Option<String>,

    #[arg(long, value_enum)]
    pub format: Option<ReportFormat>,

    /// Report directory (defaults to the outputs directory).
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long, value_name = "FILE")]
    pub checkpoint: PathBuf,

    #[command(flatten)]
    pub sampling: SamplingArgs,
}

/// Loads the config file, if any, and applies the global flags.
pub fn resolve_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(r) = cli.res {
        cfg.preprocess.resolution = r;
    }
    if let Some(d) = &cli.manifest_dir {
        cfg.paths.manifest_dir = d.clone();
    }
    Ok(cfg)
}

pub fn run(cli: Cli) -> Result<()> {
    let cfg = resolve_config(&cli)?;
    match &cli.command {
        Command::BuildDataset(a) => cmd_build_dataset(cfg, a).map(|_| ()),
        Command::Train(a) => cmd_train(cfg, a),
        Command::Sample(a) => cmd_sample(cfg, a, cli.res.is_some()).map(|_| ()),
        Command::Evaluate(a) => cmd_evaluate(cfg, a).map(|_| ()),
        Command::Ablate(a) => cmd_ablate(cfg, a, cli.res.is_some()).map(|_| ()),
    }
}

fn summary_line(m: &DatasetManifest) -> String {
    let bins: Vec<String> = m.bin_counts().iter().map(|(b, n)| format!("{b}%: {n}")).collect();
    format!("{}: {} image pairs, {} mask pairs ({})", m.split, m.image_pairs.len(), m.records.len(), bins.join(", "))
}

pub fn cmd_build_dataset(mut cfg: RunConfig, args: &BuildDatasetArgs) -> Result<Vec<DatasetManifest>> {
    if let Some(s) = args.subset {
        cfg.dataset.subset = s;
    }
    cfg.dataset.synthetic |= args.synthetic;
    if let Some(d) = &args.data_root {
        cfg.paths.data_root = Some(d.clone());
    }
    if let Some(d) = &args.image_root {
        cfg.paths.image_root = Some(d.clone());
    }
    if let Some(d) = &args.mask_root {
        cfg.paths.mask_root = Some(d.clone());
    }
    if let Some(d) = &args.out {
        cfg.paths.manifest_dir = d.clone();
    }
    cfg.resolve()?;
    let out = cfg.paths.manifest_dir.clone();
    let spec = cfg.dataset.splits.scaled(cfg.dataset.subset)?;

    let (image_root, mask_root) = if cfg.dataset.synthetic {
        log::info!("generating synthetic sources at {}px", cfg.preprocess.resolution);
        generate_synthetic_sources(&out.join("synthetic"), &spec, cfg.preprocess.resolution, cfg.seed)?
    } else {
        let under_root = |sub: &str| cfg.paths.data_root.as_ref().map(|r| r.join(sub));
        let images = cfg.paths.image_root.clone().or_else(|| under_root("images"));
        let masks = cfg.paths.mask_root.clone().or_else(|| under_root("masks"));
        let (Some(images), Some(masks)) = (images, masks) else {
            return Err(Error::Config(format!("no data sources: pass --synthetic, --data-root or set {DATA_ROOT_ENV}")));
        };
        for (what, p) in [("image root", &images), ("mask root", &masks)] {
            if !p.is_dir() {
                return Err(Error::Missing { what, path: p.clone() });
            }
        }
        (images, masks)
    };

    let bins = bin_masks(&mask_root, &cfg.preprocess)?;
    let pairs = pair_masks(&bins, &spec, cfg.seed)?;
    let mut manifests = Vec::new();
    for split in Split::ALL {
        let m = build_manifest(&image_root, &mask_root, split, &pairs[&split], &spec, cfg.seed, cfg.dataset.synthetic)?;
        m.save(&out)?;
        println!("{}", summary_line(&m));
        manifests.push(m);
    }
    cfg.archive(&out)?;
    Ok(manifests)
}

fn apply_train_flags(cfg: &mut RunConfig, a: &TrainArgs) {
    if let Some(v) = a.epochs {
        cfg.train.epochs = v;
    }
    if let Some(v) = a.batch_size {
        cfg.train.batch_size = v;
        cfg.denoiser_train.batch_size = v;
    }
    if let Some(v) = a.lr {
        cfg.train.learning_rate = v;
        cfg.denoiser_train.learning_rate = v;
    }
    if let Some(v) = a.eval_every {
        cfg.train.eval_every = v;
    }
    for (dst, src) in [
        (&mut cfg.loss.lambda1, a.lambda1),
        (&mut cfg.loss.lambda2, a.lambda2),
        (&mut cfg.loss.lambda3, a.lambda3),
        (&mut cfg.loss.lambda4, a.lambda4),
    ] {
        if let Some(v) = src {
            *dst = v;
        }
    }
    if let Some(t) = a.task {
        cfg.dataset.task = t;
    }
    match a.model {
        ModelKind::Indite => {
            if a.steps.is_some() {
                cfg.train.max_steps = a.steps;
            }
            if a.overfit_one {
                let steps = cfg.train.max_steps.unwrap_or(500);
                cfg.train.batch_size = 1;
                cfg.train.epochs = steps;
                cfg.train.eval_every = steps;
                cfg.train.max_steps = Some(steps);
            }
        }
        ModelKind::Denoiser => {
            if let Some(s) = a.steps {
                cfg.denoiser_train.steps = s;
            }
        }
    }
}

pub fn cmd_train(mut cfg: RunConfig, a: &TrainArgs) -> Result<()> {
    apply_train_flags(&mut cfg, a);
    cfg.resolve()?;
    let out = cfg.out_dir(&a.out, "train");
    let train_manifest = DatasetManifest::load_split(&cfg.paths.manifest_dir, Split::Train)?;
    let limit = if a.overfit_one { Some(1) } else { a.limit };
    let train = ManifestSource { manifest: train_manifest, spec: cfg.preprocess, task: cfg.dataset.task, limit };
    cfg.archive(&out)?;
    match a.model {
        ModelKind::Indite => train_indite(&cfg, a, train, &out),
        ModelKind::Denoiser => train_unet(&cfg, train, &out),
    }
}

fn train_indite(cfg: &RunConfig, a: &TrainArgs, train: ManifestSource, out: &Path) -> Result<()> {
    let val = if a.overfit_one {
        ManifestSource { manifest: train.manifest.clone(), spec: train.spec, task: train.task, limit: Some(1) }
    } else {
        let m = DatasetManifest::load_split(&cfg.paths.manifest_dir, Split::Val)?;
        ManifestSource { manifest: m, spec: cfg.preprocess, task: cfg.dataset.task, limit: a.val_limit }
    };
    let mut trainer = if a.resume {
        let last = out.join(LAST_CHECKPOINT);
        if !last.is_file() {
            return Err(Error::Missing { what: "checkpoint to resume", path: last });
        }
        Trainer::resume(&last, cfg.train, cfg.loss)?
    } else {
        Trainer::new(cfg.backbone, cfg.train, cfg.loss)?
    }
    .with_output_dir(out)?;
    let start = trainer.steps_taken();
    let report = trainer.fit(&train, &val)?;
    let (first, last) = (report.steps.first(), report.steps.last());
    println!("trained steps {}..{} ({} epochs done)", start, trainer.steps_taken(), trainer.epochs_done());
    if let (Some(f), Some(l)) = (first, last) {
        let change = if f.l1 > 0.0 { 100.0 * (f.l1 - l.l1) / f.l1 } else { 0.0 };
        let verdict = if l.l1 < f.l1 { "decreased" } else { "did not decrease" };
        println!("l1 loss {verdict}: {:.4} -> {:.4} ({change:.1}%)", f.l1, l.l1);
    }
    if let Some(b) = &report.best {
        println!("best validation PSNR {:.3} dB at epoch {} (step {})", b.val_psnr, b.epoch, b.step);
    }
    if let Some(p) = &report.best_checkpoint {
        println!("best checkpoint: {}", p.display());
    }
    Ok(())
}

fn train_unet(cfg: &RunConfig, train: ManifestSource, out: &Path) -> Result<()> {
    use crate::training::PairSource;
    let mut images = Vec::with_capacity(2 * train.len());
    for i in 0..train.len() {
        let p = train.pair(i)?;
        images.push(p.gt_1);
        images.push(p.gt_2);
    }
    let net = TinyUnet::new(cfg.denoiser, DType::F32, cfg.seed)?;
    let log_path = out.join("denoiser_log.jsonl");
    let mut log = BufWriter::new(File::create(&log_path).map_err(|e| Error::io(&log_path, e))?);
    let every = (cfg.denoiser_train.steps / 20).max(1);
    let losses = train_denoiser(&net, &images, &cfg.diffusion, &cfg.denoiser_train, |step, loss| {
        let _ = writeln!(log, "{}", serde_json::json!({"step": step, "loss": loss}));
        if step % every == 0 {
            log::info!("denoiser step {step}: loss {loss:.5}");
        }
    })?;
    log.flush().map_err(|e| Error::io(&log_path, e))?;
    let path = out.join(DENOISER_CHECKPOINT);
    net.save(&path, &cfg.diffusion)?;
    if let (Some(f), Some(l)) = (losses.first(), losses.last()) {
        println!("denoiser loss {f:.5} -> {l:.5} over {} steps", losses.len());
    }
    println!("denoiser checkpoint: {}", path.display());
    Ok(())
}

fn apply_sampling_flags(cfg: &mut RunConfig, s: &SamplingArgs) {
    if let Some(v) = s.steps {
        cfg.sampler.steps = v;
    }
    if let Some(v) = s.omega {
        cfg.sampler.guidance_weight = v;
    }
    if let Some(v) = s.lowpass {
        cfg.sampler.lowpass_scale = v;
    }
    if let Some(t) = s.task {
        cfg.dataset.task = t;
    }
}

/// Network plus the binarization threshold it was trained with.
struct LoadedIndite {
    net: Indite,
    tau: f64,
}

fn load_indite(path: &Path, fallback_tau: f64) -> Result<LoadedIndite> {
    if !path.is_file() {
        return Err(Error::Missing { what: "checkpoint", path: path.to_path_buf() });
    }
    let (net, c) = Indite::load(path, DType::F32)?;
    let tau = c.meta["trainer"]["train"]["tau"].as_f64().unwrap_or(fallback_tau);
    Ok(LoadedIndite { net, tau })
}

fn load_unet(path: &Path) -> Result<(TinyUnet, DiffusionConfig)> {
    if !path.is_file() {
        return Err(Error::Missing { what: "denoiser weights", path: path.to_path_buf() });
    }
    TinyUnet::load(path, DType::F32)
}

/// The first `limit` records taken round-robin across bins, so small subsets
/// still cover every bin. Without a limit, every record in manifest order.
pub fn subset(manifest: &DatasetManifest, limit: Option<usize>) -> Vec<ManifestRecord> {
    let Some(n) = limit else {
        return manifest.records.clone();
    };
    let mut seen: BTreeMap<_, usize> = BTreeMap::new();
    let mut keyed: Vec<(usize, usize)> = manifest
        .records
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let k = seen.entry(r.bin).or_insert(0);
            *k += 1;
            (*k, i)
        })
        .collect();
    keyed.sort();
    keyed.into_iter().take(n).map(|(_, i)| manifest.records[i].clone()).collect()
}

fn write_outputs(dir: &Path, outputs: &[Image; 2]) -> Result<()> {
    save_image(&outputs[0], &dir.join("out_1.png"))?;
    save_image(&outputs[1], &dir.join("out_2.png"))
}

/// One row per branch: damaged, network complement, confidence, result,
/// ground truth.
fn write_grid(path: &Path, pair: &ScenePair, comp: Option<&ComplementResult>, outputs: &[Image; 2]) -> Result<()> {
    let (c, h, w) = pair.dims();
    let blank = Image::zeros((c, h, w), DType::F32)?;
    let mut rows = Vec::new();
    for branch in 0..2 {
        let (damaged, gt) = if branch == 0 { (&pair.damaged_1, &pair.gt_1) } else { (&pair.damaged_2, &pair.gt_2) };
        let (comp_img, conf) = match comp {
            Some(r) => {
                let (img, map) = if branch == 0 { (&r.complemented_1, &r.confidence_raw_1) } else { (&r.complemented_2, &r.confidence_raw_2) };
                (img.clone(), map_to_image(map)?)
            }
            None => (blank.clone(), blank.clone()),
        };
        rows.push([damaged.clone(), comp_img, conf, outputs[branch].clone(), gt.clone()]);
    }
    let mut grid = RgbImage::new((5 * w) as u32, (2 * h) as u32);
    for (r, row) in rows.iter().enumerate() {
        for (k, tile) in row.iter().enumerate() {
            let rgb = image_to_rgb(tile)?;
            image::imageops::replace(&mut grid, &rgb, (k * w) as i64, (r * h) as i64);
        }
    }
    if let Some(d) = path.parent() {
        std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    grid.save(path).map_err(|e| Error::image(path, e))
}

pub fn cmd_sample(mut cfg: RunConfig, a: &SampleArgs, res_given: bool) -> Result<PathBuf> {
    if let Some(m) = a.mode {
        cfg.sampler.mode = m;
    }
    apply_sampling_flags(&mut cfg, &a.sampling);
    let mode = cfg.sampler.mode;
    if mode.uses_complement() && a.checkpoint.is_none() {
        return Err(Error::Config(format!("--mode {mode} needs a network checkpoint (--checkpoint)")));
    }
    let indite = match &a.checkpoint {
        Some(p) => Some(load_indite(p, cfg.train.tau)?),
        None => None,
    };
    if let (Some(l), false) = (&indite, res_given) {
        cfg.preprocess.resolution = l.net.config().input_resolution;
    }
    cfg.resolve()?;
    let (unet, diffusion) = load_unet(&a.sampling.denoiser)?;
    cfg.diffusion = diffusion;
    let schedule = diffusion.schedule()?.respaced(cfg.sampler.steps)?;
    let manifest = DatasetManifest::load_split(&cfg.paths.manifest_dir, a.sampling.split)?;
    let out = cfg.out_dir(&a.sampling.out, "sample");
    cfg.archive(&out)?;

    let mut trace = if a.trace {
        let p = out.join("trace.jsonl");
        Some((BufWriter::new(File::create(&p).map_err(|e| Error::io(&p, e))?), p))
    } else {
        None
    };
    let recs = subset(&manifest, a.sampling.limit);
    for (i, rec) in recs.iter().enumerate() {
        let pair = load_sample(&manifest, rec, &cfg.preprocess, cfg.dataset.task)?;
        let comp = indite.as_ref().map(|l| l.net.forward(&pair, l.tau)).transpose()?;
        let inputs = branch_inputs(mode, &pair, comp.as_ref())?;
        let sc = SamplerConfig { seed: cfg.sampler.seed.wrapping_add(i as u64), ..cfg.sampler };
        let sample = sample_duo(&inputs, &unet, &schedule, &sc)?;
        let dir = out.join(&rec.id);
        write_outputs(&dir, &sample.outputs)?;
        write_grid(&dir.join("grid.jpg"), &pair, comp.as_ref(), &sample.outputs)?;
        if let Some((w, p)) = trace.as_mut() {
            for t in &sample.trace {
                let line = serde_json::json!({
                    "record": rec.id, "t": t.t, "branch": t.branch,
                    "residual_mean_abs": t.residual_mean_abs, "guidance_norm": t.guidance_norm,
                });
                writeln!(w, "{line}").map_err(|e| Error::io(p.as_path(), e))?;
            }
        }
        log::info!("sampled {} ({}/{})", rec.id, i + 1, recs.len());
    }
    if let Some((mut w, p)) = trace {
        w.flush().map_err(|e| Error::io(&p, e))?;
    }
    println!("{mode}: wrote {} records to {}", recs.len(), out.display());
    Ok(out)
}

/// Scores `<dir>/<record>/out_{1,2}.png` against the manifest's ground
/// truth at the outputs' resolution.
pub fn evaluate_dir(
    dir: &Path,
    manifest: &DatasetManifest,
    recs: &[ManifestRecord],
    spec: &PreprocessSpec,
    task: InpaintTask,
    method: &str,
) -> Result<MetricReport> {
    if recs.is_empty() {
        return Err(Error::Validation("no records to evaluate".into()));
    }
    let extractor = RandomPyramid::with_default_seed(DType::F32)?;
    let mut items = Vec::with_capacity(recs.len());
    for rec in recs {
        let p1 = dir.join(&rec.id).join("out_1.png");
        let p2 = dir.join(&rec.id).join("out_2.png");
        for p in [&p1, &p2] {
            if !p.is_file() {
                return Err(Error::Missing { what: "sampler output", path: p.clone() });
            }
        }
        let predictions = [read_image(&p1)?, read_image(&p2)?];
        let (_, h, w) = predictions[0].dims();
        if h != w {
            return Err(Error::Shape(format!("{}: outputs must be square, got {h}x{w}", p1.display())));
        }
        let spec = PreprocessSpec { resolution: h, ..*spec };
        let pair = load_sample(manifest, rec, &spec, task)?;
        items.push(EvalItem { id: rec.id.clone(), bin: rec.bin, predictions, targets: [pair.gt_1, pair.gt_2] });
    }
    evaluate_suite(&items, task, method, &extractor)
}

fn write_report(dir: &Path, stem: &str, table: &str, json: &str, format: ReportFormat) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    if matches!(format, ReportFormat::Table | ReportFormat::Both) {
        let p = dir.join(format!("{stem}.txt"));
        std::fs::write(&p, table).map_err(|e| Error::io(&p, e))?;
    }
    if matches!(format, ReportFormat::Json | ReportFormat::Both) {
        let p = dir.join(format!("{stem}.json"));
        std::fs::write(&p, json).map_err(|e| Error::io(&p, e))?;
    }
    Ok(())
}

pub fn cmd_evaluate(mut cfg: RunConfig, a: &EvaluateArgs) -> Result<MetricReport> {
    if let Some(t) = a.task {
        cfg.dataset.task = t;
    }
    if let Some(f) = a.format {
        cfg.eval.format = f;
    }
    cfg.resolve()?;
    if !a.outputs.is_dir() {
        return Err(Error::Missing { what: "outputs directory", path: a.outputs.clone() });
    }
    let manifest = DatasetManifest::load_split(&cfg.paths.manifest_dir, a.split)?;
    let method = a.method.clone().unwrap_or_else(|| {
        a.outputs.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| "outputs".into())
    });
    let report = evaluate_dir(&a.outputs, &manifest, &subset(&manifest, a.limit), &cfg.preprocess, cfg.dataset.task, &method)?;
    let out = a.out.clone().unwrap_or_else(|| a.outputs.clone());
    let table = report.to_table();
    write_report(&out, "report", &table, &report.to_json()?, cfg.eval.format)?;
    cfg.archive(&out)?;
    print!("{table}");
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    /// Sampler mode, or `None` for the network's composited output.
    pub mode: Option<SamplerMode>,
    pub scores: SampleScores,
    /// SHA-256 over every output PNG of the row, in record order.
    pub digest: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub task: InpaintTask,
    pub records: usize,
    pub guidance_weight: f64,
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn row(&self, name: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.name == name)
    }

    pub fn to_table(&self) -> String {
        let mut s = format!("{:<14} {:>8} {:>7} {:>8} {:>8}  digest\n", "method", "PSNR", "SSIM", "L1", "percep");
        for r in &self.rows {
            s += &format!(
                "{:<14} {:>8.3} {:>7.4} {:>8.4} {:>8.4}  {}\n",
                r.name,
                r.scores.psnr,
                r.scores.ssim,
                r.scores.l1,
                r.scores.perceptual,
                &r.digest[..16]
            );
        }
        s
    }
}

pub const ABLATION_ROWS: [(&str, Option<SamplerMode>); 5] = [
    ("DDNM", Some(SamplerMode::Ddnm)),
    ("DDNM-Interact", Some(SamplerMode::DdnmInteract)),
    ("InDiTE", None),
    ("InDiTE-DDNM", Some(SamplerMode::InditeDdnm)),
    ("InDiTE-Diff", Some(SamplerMode::InditeDiff)),
];

fn row_dir(name: &str) -> String {
    name.to_lowercase()
}

fn digest_dir(dir: &Path, recs: &[ManifestRecord]) -> Result<String> {
    let mut h = Sha256::new();
    for rec in recs {
        for f in ["out_1.png", "out_2.png"] {
            let p = dir.join(&rec.id).join(f);
            h.update(std::fs::read(&p).map_err(|e| Error::io(&p, e))?);
        }
    }
    Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

pub fn cmd_ablate(mut cfg: RunConfig, a: &AblateArgs, res_given: bool) -> Result<AblationReport> {
    apply_sampling_flags(&mut cfg, &a.sampling);
    let indite = load_indite(&a.checkpoint, cfg.train.tau)?;
    if !res_given {
        cfg.preprocess.resolution = indite.net.config().input_resolution;
    }
    cfg.resolve()?;
    let (unet, diffusion) = load_unet(&a.sampling.denoiser)?;
    cfg.diffusion = diffusion;
    let schedule = diffusion.schedule()?.respaced(cfg.sampler.steps)?;
    let manifest = DatasetManifest::load_split(&cfg.paths.manifest_dir, a.sampling.split)?;
    let out = cfg.out_dir(&a.sampling.out, "ablate");
    cfg.archive(&out)?;
    let recs = subset(&manifest, Some(a.sampling.limit.unwrap_or(4)));

    for (i, rec) in recs.iter().enumerate() {
        let pair = load_sample(&manifest, rec, &cfg.preprocess, cfg.dataset.task)?;
        let comp = indite.net.forward(&pair, indite.tau)?;
        for (name, mode) in ABLATION_ROWS {
            let dir = out.join(row_dir(name)).join(&rec.id);
            let outputs = match mode {
                None => [comp.complemented_1.clone(), comp.complemented_2.clone()],
                Some(mode) => {
                    let inputs = branch_inputs(mode, &pair, Some(&comp))?;
                    let sc = SamplerConfig { mode, seed: cfg.sampler.seed.wrapping_add(i as u64), ..cfg.sampler };
                    sample_duo(&inputs, &unet, &schedule, &sc)?.outputs
                }
            };
            write_outputs(&dir, &outputs)?;
        }
        log::info!("ablation {} ({}/{})", rec.id, i + 1, recs.len());
    }

    let mut rows = Vec::new();
    let mut per_bin: BTreeMap<String, MetricReport> = BTreeMap::new();
    for (name, mode) in ABLATION_ROWS {
        let dir = out.join(row_dir(name));
        let report = evaluate_dir(&dir, &manifest, &recs, &cfg.preprocess, cfg.dataset.task, name)?;
        rows.push(AblationRow { name: name.into(), mode, scores: report.overall(), digest: digest_dir(&dir, &recs)? });
        per_bin.insert(name.into(), report);
    }
    let report = AblationReport { task: cfg.dataset.task, records: recs.len(), guidance_weight: cfg.sampler.guidance_weight, rows };
    let table = report.to_table();
    let json = serde_json::to_string_pretty(&serde_json::json!({"summary": report, "per_bin": per_bin}))? + "\n";
    write_report(&out, "ablation", &table, &json, cfg.eval.format)?;
    print!("{table}");
    Ok(report)
}
