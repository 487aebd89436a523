use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use candle_core::{DType, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::complement::ScenePair;
use crate::error::{Error, Result};
use crate::features::RandomPyramid;
use crate::indite::{composite, BackboneConfig, Indite};
use crate::metrics::psnr;
use crate::training::discriminator::PatchDiscriminator;
use crate::training::losses::{complement_loss, confidence_loss, confidence_target, replicate_channels, AdversarialObjective, LossWeights, Scorer};
use crate::training::optim::{clip_grad_norm, Adam};

/// Indexed access to scene pairs.
pub trait PairSource {
    fn len(&self) -> usize;
    fn pair(&self, index: usize) -> Result<ScenePair>;
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl PairSource for [ScenePair] {
    fn len(&self) -> usize {
        <[ScenePair]>::len(self)
    }

    fn pair(&self, index: usize) -> Result<ScenePair> {
        Ok(self[index].clone())
    }
}

impl PairSource for Vec<ScenePair> {
    fn len(&self) -> usize {
        self.as_slice().len()
    }

    fn pair(&self, index: usize) -> Result<ScenePair> {
        Ok(self[index].clone())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub epochs: usize,
    pub eval_every: usize,
    pub seed: u64,
    pub batch_size: usize,
    pub resolution: usize,
    /// Stops after this many optimizer steps in total.
    pub max_steps: Option<usize>,
    /// Global gradient-norm bound; 0 disables clipping.
    pub grad_clip: f64,
    pub disc_base_channels: usize,
    pub adversarial: AdversarialObjective,
    /// Binarization threshold for the confidence head.
    pub tau: f64,
    /// Residual magnitude mapped to zero trust in the confidence target.
    pub residual_scale: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            adam_beta1: 0.0,
            adam_beta2: 0.9,
            epochs: 200,
            eval_every: 5,
            seed: 0,
            batch_size: 4,
            resolution: 256,
            max_steps: None,
            grad_clip: 1.0,
            disc_base_channels: 32,
            adversarial: AdversarialObjective::default(),
            tau: 0.5,
            residual_scale: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return bad("adam betas must lie in [0, 1)".into());
        }
        if self.epochs == 0 || self.eval_every == 0 || self.batch_size == 0 || self.resolution == 0 || self.disc_base_channels == 0 {
            return bad("epochs, eval_every, batch_size, resolution and disc_base_channels must be positive".into());
        }
        if self.epochs % self.eval_every != 0 {
            return bad(format!("eval_every ({}) must divide epochs ({})", self.eval_every, self.epochs));
        }
        if self.max_steps == Some(0) {
            return bad("max_steps must be positive".into());
        }
        if !(self.grad_clip >= 0.0) {
            return bad("grad_clip must be >= 0".into());
        }
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return bad(format!("tau must lie in (0, 1), got {}", self.tau));
        }
        if !(self.residual_scale > 0.0) {
            return bad("residual_scale must be positive".into());
        }
        Ok(())
    }
}

/// Loss values of one optimizer step (branch sums).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: usize,
    pub l1: f64,
    pub gan: f64,
    pub perceptual: f64,
    pub style: f64,
    pub conf_l1: f64,
    pub conf_gan: f64,
    pub conf_perceptual: f64,
    pub conf_style: f64,
    pub total: f64,
    pub disc: f64,
    pub grad_norm: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_psnr: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    /// 1-based index of the epoch after which the evaluation ran.
    pub epoch: usize,
    pub step: u64,
    pub val_psnr: f64,
}

/// Index of the highest PSNR; the first one wins ties, NaN never wins.
pub fn select_best(psnrs: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, p) in psnrs.iter().enumerate() {
        if p.is_nan() {
            continue;
        }
        if best.is_none_or(|b| *p > psnrs[b]) {
            best = Some(i);
        }
    }
    best
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub steps: Vec<StepRecord>,
    pub evaluations: Vec<Evaluation>,
    pub best: Option<Evaluation>,
    pub best_checkpoint: Option<PathBuf>,
}

pub const BEST_CHECKPOINT: &str = "best.safetensors";
pub const LAST_CHECKPOINT: &str = "last.safetensors";
pub const TRAIN_LOG: &str = "train_log.jsonl";

/// Joint optimization of the network and two patch discriminators (one for
/// complemented images, one for confidence maps).
pub struct Trainer {
    cfg: TrainConfig,
    weights: LossWeights,
    net: Indite,
    disc_image: PatchDiscriminator,
    disc_conf: PatchDiscriminator,
    extractor: RandomPyramid,
    opt: Adam,
    opt_image: Adam,
    opt_conf: Adam,
    step: u64,
    epochs_done: usize,
    evaluations: Vec<Evaluation>,
    out_dir: Option<PathBuf>,
    log: Option<BufWriter<File>>,
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

fn stack_branches(pairs: &[ScenePair], dt: DType) -> Result<(Tensor, Tensor, Tensor)> {
    let mut damaged = Vec::with_capacity(2 * pairs.len());
    let mut masks = Vec::with_capacity(2 * pairs.len());
    let mut gts = Vec::with_capacity(2 * pairs.len());
    for branch in 0..2 {
        for p in pairs {
            let (d, m, g) = if branch == 0 { (&p.damaged_1, &p.mask_1, &p.gt_1) } else { (&p.damaged_2, &p.mask_2, &p.gt_2) };
            damaged.push(d.tensor().to_dtype(dt)?);
            masks.push(m.tensor().to_dtype(dt)?);
            gts.push(g.tensor().to_dtype(dt)?);
        }
    }
    Ok((Tensor::stack(&damaged, 0)?, Tensor::stack(&masks, 0)?, Tensor::stack(&gts, 0)?))
}

impl Trainer {
    pub fn new(backbone: BackboneConfig, cfg: TrainConfig, weights: LossWeights) -> Result<Self> {
        cfg.validate()?;
        weights.validate()?;
        let backbone = BackboneConfig { input_resolution: cfg.resolution, ..backbone };
        let dt = DType::F32;
        let net = Indite::new(backbone, dt, cfg.seed)?;
        let disc_image = PatchDiscriminator::new(3, cfg.disc_base_channels, dt, cfg.seed.wrapping_add(1))?;
        let disc_conf = PatchDiscriminator::new(3, cfg.disc_base_channels, dt, cfg.seed.wrapping_add(2))?;
        if weights.lambda2 > 0.0 && cfg.resolution < PatchDiscriminator::MIN_RESOLUTION {
            return Err(Error::Config(format!(
                "adversarial loss needs resolution >= {}, got {}",
                PatchDiscriminator::MIN_RESOLUTION,
                cfg.resolution
            )));
        }
        let opt = Adam::new(net.params(), cfg.learning_rate, cfg.adam_beta1, cfg.adam_beta2)?;
        let opt_image = Adam::new(disc_image.params(), cfg.learning_rate, cfg.adam_beta1, cfg.adam_beta2)?;
        let opt_conf = Adam::new(disc_conf.params(), cfg.learning_rate, cfg.adam_beta1, cfg.adam_beta2)?;
        Ok(Self {
            cfg,
            weights,
            net,
            disc_image,
            disc_conf,
            extractor: RandomPyramid::with_default_seed(dt)?,
            opt,
            opt_image,
            opt_conf,
            step: 0,
            epochs_done: 0,
            evaluations: Vec::new(),
            out_dir: None,
            log: None,
        })
    }

    /// Checkpoints and the step log go to `dir`.
    pub fn with_output_dir(mut self, dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(TRAIN_LOG);
        let file = OpenOptions::new().create(true).append(true).open(&path).map_err(|e| Error::io(&path, e))?;
        self.log = Some(BufWriter::new(file));
        self.out_dir = Some(dir.to_path_buf());
        Ok(self)
    }

    /// Restores weights, optimizer moments and counters from a checkpoint
    /// written by [`Trainer::save_checkpoint`]. Sample order depends only on
    /// `(seed, epoch)`, so training continues exactly as if uninterrupted.
    pub fn resume(path: &Path, cfg: TrainConfig, weights: LossWeights) -> Result<Self> {
        let (net, c) = Indite::load(path, DType::F32)?;
        let state = &c.meta["trainer"];
        if state.is_null() {
            return Err(Error::Checkpoint(format!("{}: weights-only checkpoint cannot be resumed", path.display())));
        }
        let mut t = Self::new(*net.config(), cfg, weights)?;
        t.net.params().load(&c.tensors, Indite::CHECKPOINT_PREFIX)?;
        t.disc_image.params().load(&c.tensors, "disc_image.")?;
        t.disc_conf.params().load(&c.tensors, "disc_conf.")?;
        let step = state["step"].as_u64().ok_or_else(|| Error::Checkpoint("missing step".into()))?;
        t.opt.load_state(&c.tensors, "optim.net.", step)?;
        t.opt_image.load_state(&c.tensors, "optim.disc_image.", step)?;
        t.opt_conf.load_state(&c.tensors, "optim.disc_conf.", step)?;
        t.step = step;
        t.epochs_done = state["epochs_done"].as_u64().unwrap_or(0) as usize;
        t.evaluations = serde_json::from_value(state["evaluations"].clone())?;
        Ok(t)
    }

    pub fn network(&self) -> &Indite {
        &self.net
    }

    pub fn into_network(self) -> Indite {
        self.net
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn epochs_done(&self) -> usize {
        self.epochs_done
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    fn step_discriminators(&mut self, gt: &Tensor, raw: &Tensor, conf: &Tensor, target: &Tensor) -> Result<f64> {
        if self.weights.lambda2 == 0.0 {
            return Ok(0.0);
        }
        let obj = self.cfg.adversarial;
        let d_img = obj.discriminator(&self.disc_image.score(gt)?, &self.disc_image.score(&raw.detach())?)?;
        let d_conf = obj.discriminator(
            &self.disc_conf.score(&replicate_channels(target)?)?,
            &self.disc_conf.score(&replicate_channels(&conf.detach())?)?,
        )?;
        let total = d_img.add(&d_conf)?;
        let value = scalar(&total)?;
        if !value.is_finite() {
            return Err(Error::NonFinite { what: "discriminator loss".into(), step: self.step as usize });
        }
        let grads = total.backward()?;
        for (opt, _) in [(&mut self.opt_image, 0), (&mut self.opt_conf, 1)] {
            let mut g = opt.gradients(&grads);
            if self.cfg.grad_clip > 0.0 {
                clip_grad_norm(&mut g, self.cfg.grad_clip)?;
            }
            opt.step(&g)?;
        }
        Ok(value)
    }

    /// One update of the discriminators followed by one update of the
    /// network on `batch`.
    pub fn train_step(&mut self, batch: &[ScenePair], epoch: usize) -> Result<StepRecord> {
        if batch.is_empty() {
            return Err(Error::Validation("empty training batch".into()));
        }
        let (_, h, w) = batch[0].dims();
        if h != self.cfg.resolution || w != self.cfg.resolution {
            return Err(Error::Shape(format!("training pair is {h}x{w}, configured resolution {}", self.cfg.resolution)));
        }
        let dt = self.net.dtype();
        let (damaged, masks, gt) = stack_branches(batch, dt)?;
        let out = self.net.forward_stacked(&Tensor::cat(&[&damaged, &masks], 1)?)?;
        let raw = out.complement;
        let conf = out.confidence;
        let completed = composite(&damaged, &raw, &masks)?.detach();
        let target = confidence_target(&gt, &completed, self.cfg.residual_scale)?;

        let disc = self.step_discriminators(&gt, &raw, &conf, &target)?;

        let obj = self.cfg.adversarial;
        let c = complement_loss(&raw, &gt, &self.weights, Some(&self.disc_image), &self.extractor, obj)?;
        let k = confidence_loss(&conf, &target, &self.weights, Some(&self.disc_conf), &self.extractor, obj)?;
        // batch means over both stacked branches; the objective sums the branches
        let total = c.total.add(&k.total)?.affine(2.0, 0.0)?;
        let total_value = scalar(&total)?;
        if !total_value.is_finite() {
            return Err(Error::NonFinite { what: "training loss".into(), step: self.step as usize });
        }
        let grads = total.backward()?;
        let mut g = self.opt.gradients(&grads);
        let grad_norm = if self.cfg.grad_clip > 0.0 {
            let n = clip_grad_norm(&mut g, self.cfg.grad_clip)?;
            if n > self.cfg.grad_clip {
                log::debug!("step {}: gradient norm {n:.3} clipped to {}", self.step, self.cfg.grad_clip);
            }
            n
        } else {
            clip_grad_norm(&mut g, f64::INFINITY)?
        };
        if !grad_norm.is_finite() {
            return Err(Error::NonFinite { what: "gradient norm".into(), step: self.step as usize });
        }
        self.opt.step(&g)?;
        self.step += 1;
        let [l1, gan, perceptual, style, _] = c.scalars()?;
        let [conf_l1, conf_gan, conf_perceptual, conf_style, _] = k.scalars()?;
        let rec = StepRecord {
            step: self.step,
            epoch,
            l1: 2.0 * l1,
            gan: 2.0 * gan,
            perceptual: 2.0 * perceptual,
            style: 2.0 * style,
            conf_l1: 2.0 * conf_l1,
            conf_gan: 2.0 * conf_gan,
            conf_perceptual: 2.0 * conf_perceptual,
            conf_style: 2.0 * conf_style,
            total: total_value,
            disc,
            grad_norm,
            val_psnr: None,
        };
        self.write_log(&rec)?;
        Ok(rec)
    }

    fn write_log(&mut self, rec: &StepRecord) -> Result<()> {
        if let Some(log) = self.log.as_mut() {
            let line = serde_json::to_string(rec)?;
            let path = self.out_dir.as_ref().map(|d| d.join(TRAIN_LOG)).unwrap_or_default();
            writeln!(log, "{line}").map_err(|e| Error::io(&path, e))?;
            log.flush().map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }

    /// Mean PSNR of the complemented images against ground truth over both
    /// branches of every validation pair.
    pub fn evaluate(&self, val: &dyn PairSource) -> Result<f64> {
        if val.is_empty() {
            return Err(Error::Validation("validation split is empty".into()));
        }
        let mut sum = 0.0;
        for i in 0..val.len() {
            let pair = val.pair(i)?;
            let r = self.net.forward(&pair, self.cfg.tau)?;
            sum += psnr(&r.complemented_1, &pair.gt_1.to_dtype(self.net.dtype())?)?;
            sum += psnr(&r.complemented_2, &pair.gt_2.to_dtype(self.net.dtype())?)?;
        }
        Ok(sum / (2 * val.len()) as f64)
    }

    /// Sample order for `epoch`, a function of the seed and epoch only.
    pub fn epoch_order(&self, n: usize, epoch: usize) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        rng.set_stream(epoch as u64 + 1);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        order
    }

    fn budget_left(&self) -> bool {
        self.cfg.max_steps.is_none_or(|m| (self.step as usize) < m)
    }

    /// Runs the remaining epochs, evaluating every `eval_every` epochs and
    /// keeping the checkpoint with the best validation PSNR.
    pub fn fit(&mut self, train: &dyn PairSource, val: &dyn PairSource) -> Result<TrainReport> {
        if train.is_empty() {
            return Err(Error::Validation("training split is empty".into()));
        }
        if val.is_empty() {
            return Err(Error::Validation("validation split is empty".into()));
        }
        let mut steps = Vec::new();
        while self.epochs_done < self.cfg.epochs && self.budget_left() {
            let epoch = self.epochs_done + 1;
            let order = self.epoch_order(train.len(), epoch);
            for chunk in order.chunks(self.cfg.batch_size) {
                if !self.budget_left() {
                    break;
                }
                let batch = chunk.iter().map(|&i| train.pair(i)).collect::<Result<Vec<_>>>()?;
                steps.push(self.train_step(&batch, epoch)?);
            }
            self.epochs_done = epoch;
            let finished = !self.budget_left() || epoch == self.cfg.epochs;
            if epoch % self.cfg.eval_every == 0 || finished {
                let p = self.evaluate(val)?;
                log::info!("epoch {epoch} step {}: validation PSNR {p:.3} dB", self.step);
                let ev = Evaluation { epoch, step: self.step, val_psnr: p };
                self.evaluations.push(ev);
                if let Some(last) = steps.last_mut() {
                    last.val_psnr = Some(p);
                }
                let eval_rec = serde_json::json!({"step": self.step, "epoch": epoch, "val_psnr": p});
                if let Some(log) = self.log.as_mut() {
                    let _ = writeln!(log, "{eval_rec}");
                    let _ = log.flush();
                }
                if let Some(dir) = self.out_dir.clone() {
                    let psnrs: Vec<f64> = self.evaluations.iter().map(|e| e.val_psnr).collect();
                    if select_best(&psnrs) == Some(psnrs.len() - 1) {
                        self.save_checkpoint(&dir.join(BEST_CHECKPOINT))?;
                    }
                    self.save_checkpoint(&dir.join(LAST_CHECKPOINT))?;
                }
            }
        }
        let psnrs: Vec<f64> = self.evaluations.iter().map(|e| e.val_psnr).collect();
        let best = select_best(&psnrs).map(|i| self.evaluations[i].clone());
        let best_checkpoint = self.out_dir.as_ref().map(|d| d.join(BEST_CHECKPOINT)).filter(|p| p.is_file());
        Ok(TrainReport { steps, evaluations: self.evaluations.clone(), best, best_checkpoint })
    }

    /// Network weights, both discriminators and all optimizer moments.
    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let mut extra = BTreeMap::new();
        extra.extend(self.disc_image.params().tensors("disc_image."));
        extra.extend(self.disc_conf.params().tensors("disc_conf."));
        extra.extend(self.opt.state("optim.net."));
        extra.extend(self.opt_image.state("optim.disc_image."));
        extra.extend(self.opt_conf.state("optim.disc_conf."));
        let mut meta = serde_json::Map::new();
        let last = self.evaluations.last();
        meta.insert(
            "trainer".into(),
            serde_json::json!({
                "step": self.step,
                "epochs_done": self.epochs_done,
                "val_psnr": last.map(|e| e.val_psnr),
                "evaluations": self.evaluations,
                "train": self.cfg,
                "weights": self.weights,
            }),
        );
        self.net.save(path, extra, meta)
    }
}
