//! Training loop, inference and run records.

mod ablation;
mod adam;

pub use ablation::{benchmark_data, run_ablation, variant_means, AblationSpec, RunResult, Variant};
pub use adam::{adam_step, cosine_lr, AdamState};

use crate::config::KeyValues;
use crate::error::{Error, Result};
use crate::losses::{signed_distance, training_loss, LossConfig, LossMode, SignedDistanceField};
use crate::metrics::{aggregate, evaluate_case, Aggregate, MetricReport};
use crate::model::{save_checkpoint, Mode, Network};
use crate::parallel;
use crate::preprocess::{
    argmax_labels, clamp_and_window, extract_patches, resample, stitch_patches, tile_origins, crop_patch, Interp,
    PatchMode, PreprocessConfig,
};
use crate::tensor::{Tape, Tensor};
use crate::volume::{LabelVolume, Volume};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

/// Draws allowed per training sample before a single-label patch is skipped.
pub const MAX_PATCH_DRAWS: usize = 10;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub initial_lr: f64,
    pub lr_min: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub loss_mode: LossMode,
    pub loss: LossConfig,
    pub seed: u64,
    /// cubic training patch edge in voxels
    pub patch_size: usize,
    pub foreground_probability: f64,
    /// tile overlap in voxels for validation inference
    pub patch_overlap: usize,
    /// validate every this many epochs; 0 validates after the last epoch only
    pub val_every: usize,
    pub checkpoint_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            initial_lr: 0.01,
            lr_min: 0.0,
            beta1: 0.5,
            beta2: 0.999,
            adam_eps: 1e-8,
            batch_size: 2,
            max_epochs: 200,
            loss_mode: LossMode::Combined,
            loss: LossConfig::default(),
            seed: 0,
            patch_size: 32,
            foreground_probability: 0.5,
            patch_overlap: 0,
            val_every: 10,
            checkpoint_dir: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.initial_lr > 0.0) || !(self.lr_min >= 0.0) {
            return Err(Error::Config("initial_lr must be > 0 and lr_min >= 0".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("beta1 and beta2 must lie in [0, 1)".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        self.loss.validate()?;
        self.preprocess().validate()
    }

    /// Patch settings as a preprocessing config.
    pub fn preprocess(&self) -> PreprocessConfig {
        PreprocessConfig {
            patch_size: self.patch_size,
            patch_overlap: self.patch_overlap,
            foreground_probability: self.foreground_probability,
            ..PreprocessConfig::default()
        }
    }

    pub fn from_kv(kv: &mut KeyValues) -> Result<Self> {
        let d = Self::default();
        let cfg = TrainConfig {
            initial_lr: kv.take_or("initial_lr", d.initial_lr)?,
            lr_min: kv.take_or("lr_min", d.lr_min)?,
            beta1: kv.take_or("beta1", d.beta1)?,
            beta2: kv.take_or("beta2", d.beta2)?,
            adam_eps: kv.take_or("adam_eps", d.adam_eps)?,
            batch_size: kv.take_or("batch_size", d.batch_size)?,
            max_epochs: kv.take_or("max_epochs", d.max_epochs)?,
            loss_mode: kv.take_or("loss_mode", d.loss_mode)?,
            loss: LossConfig::from_kv(kv)?,
            seed: kv.take_or("seed", d.seed)?,
            patch_size: kv.take_or("patch_size", d.patch_size)?,
            foreground_probability: kv.take_or("foreground_probability", d.foreground_probability)?,
            patch_overlap: kv.take_or("patch_overlap", d.patch_overlap)?,
            val_every: kv.take_or("val_every", d.val_every)?,
            checkpoint_dir: kv.take::<String>("checkpoint_dir")?.map(PathBuf::from),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_kv(&self, kv: &mut KeyValues) {
        kv.set("initial_lr", self.initial_lr);
        kv.set("lr_min", self.lr_min);
        kv.set("beta1", self.beta1);
        kv.set("beta2", self.beta2);
        kv.set("adam_eps", self.adam_eps);
        kv.set("batch_size", self.batch_size);
        kv.set("max_epochs", self.max_epochs);
        kv.set("loss_mode", self.loss_mode);
        self.loss.to_kv(kv);
        kv.set("seed", self.seed);
        kv.set("patch_size", self.patch_size);
        kv.set("foreground_probability", self.foreground_probability);
        kv.set("patch_overlap", self.patch_overlap);
        kv.set("val_every", self.val_every);
        if let Some(d) = &self.checkpoint_dir {
            kv.set("checkpoint_dir", d.display());
        }
    }
}

/// A preprocessed case: windowed intensities at the working spacing.
#[derive(Clone, Debug)]
pub struct Case {
    pub id: String,
    pub image: Volume,
    pub label: LabelVolume,
}

#[derive(Clone, Debug, Default)]
pub struct Dataset {
    pub train: Vec<Case>,
    pub validation: Vec<Case>,
}

#[derive(Clone, Debug)]
pub struct Validation {
    pub epoch: usize,
    pub cases: Vec<(String, MetricReport)>,
    pub summary: Aggregate,
}

#[derive(Clone, Debug)]
pub struct RunRecord {
    pub config: TrainConfig,
    /// extra provenance, e.g. the network config
    pub echo: KeyValues,
    /// mean training loss per epoch
    pub epoch_losses: Vec<f64>,
    pub lr_trace: Vec<f64>,
    pub validation: Vec<Validation>,
    pub checkpoints: Vec<PathBuf>,
    pub skipped_patches: usize,
}

impl RunRecord {
    /// `epoch,lr,loss` with one row per epoch.
    pub fn loss_csv(&self) -> String {
        let mut out = String::from("epoch,lr,loss\n");
        for (e, (lr, l)) in self.lr_trace.iter().zip(&self.epoch_losses).enumerate() {
            let _ = writeln!(out, "{},{lr},{l}", e + 1);
        }
        out
    }

    pub fn manifest(&self) -> String {
        let mut kv = self.echo.clone();
        self.config.to_kv(&mut kv);
        let mut out = String::from("RUN1\n");
        out.push_str(&kv.to_text());
        let _ = writeln!(out, "epochs_completed={}", self.epoch_losses.len());
        let _ = writeln!(out, "skipped_patches={}", self.skipped_patches);
        for v in &self.validation {
            let s = &v.summary;
            let _ = writeln!(
                out,
                "validation.{}=dsc:{} assd_mm:{} hd95_mm:{}",
                v.epoch,
                s.dsc.mean,
                s.assd.map_or(f64::NAN, |m| m.mean),
                s.hd95.map_or(f64::NAN, |m| m.mean)
            );
        }
        for (i, c) in self.checkpoints.iter().enumerate() {
            let _ = writeln!(out, "checkpoint.{i}={}", c.display());
        }
        out
    }

    /// Write `manifest.txt` and `loss.csv` into `dir`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (name, text) in [("manifest.txt", self.manifest()), ("loss.csv", self.loss_csv())] {
            let p = dir.join(name);
            std::fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
        }
        Ok(())
    }
}

/// One training sample: a mixed-label patch (and its SDF when the loss needs it).
struct Sample {
    image: Vec<f32>,
    label: LabelVolume,
    sdf: Option<SignedDistanceField>,
}

fn draw_sample(case: &Case, cfg: &TrainConfig, seed: u64) -> Result<Option<Sample>> {
    let pre = cfg.preprocess();
    let mut stream = extract_patches(&case.image, Some(&case.label), &pre, seed, PatchMode::Training)?;
    for _ in 0..MAX_PATCH_DRAWS {
        let p = stream.next().expect("training sampler is endless");
        let label = p.label.expect("label was supplied");
        if !label.is_mixed() {
            continue;
        }
        let sdf = if cfg.loss_mode.needs_sdf() { Some(signed_distance(&label)?) } else { None };
        return Ok(Some(Sample {
            image: p.image.data,
            label,
            sdf,
        }));
    }
    log::warn!(
        "case {}: no patch with both labels in {MAX_PATCH_DRAWS} draws; skipping it this epoch",
        case.id
    );
    Ok(None)
}

fn mix_seed(seed: u64, epoch: usize, case: usize) -> u64 {
    seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (case as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F)
}

/// One optimisation step on a batch; returns the loss.
fn train_step(net: &mut Network, batch: &[Sample], cfg: &TrainConfig, lr: f64, adam: &mut AdamState) -> Result<f64> {
    let p = cfg.patch_size;
    let data: Vec<f32> = batch.iter().flat_map(|s| s.image.iter().copied()).collect();
    let x = Tensor::new(vec![batch.len(), 1, p, p, p], data)?;
    let labels: Vec<LabelVolume> = batch.iter().map(|s| s.label.clone()).collect();
    let sdfs: Vec<SignedDistanceField> = batch.iter().filter_map(|s| s.sdf.clone()).collect();
    let mut tape = Tape::new();
    let xv = tape.leaf(x, false);
    let fwd = net.forward(&mut tape, xv, Mode::Train)?;
    let loss = training_loss(&mut tape, cfg.loss_mode, fwd.probs, &labels, &sdfs, &cfg.loss)?;
    let value = tape.value(loss).item() as f64;
    if !value.is_finite() {
        return Err(Error::NonFinite(format!("training loss is {value}")));
    }
    tape.backward(loss)?;
    let grads: Vec<Tensor> = fwd
        .params
        .iter()
        .zip(net.params())
        .map(|(&v, p)| tape.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(p.shape())))
        .collect();
    if let Some(i) = grads.iter().position(|g| !g.all_finite()) {
        return Err(Error::NonFinite(format!("gradient of {}", net.param_names()[i])));
    }
    adam_step(net.params_mut(), &grads, adam, lr, cfg.beta1, cfg.beta2, cfg.adam_eps);
    net.update_running_stats(&fwd.bn_stats);
    Ok(value)
}

fn validate_cases(net: &Network, cases: &[Case], cfg: &TrainConfig, epoch: usize) -> Result<Option<Validation>> {
    if cases.is_empty() {
        return Ok(None);
    }
    let mut reports = Vec::with_capacity(cases.len());
    for c in cases {
        let pred = infer_prepared(net, &c.image, cfg.patch_size, cfg.patch_overlap)?;
        reports.push((c.id.clone(), evaluate_case(&pred, &c.label)?));
    }
    let summary = aggregate(&reports.iter().map(|r| r.1).collect::<Vec<_>>())?;
    Ok(Some(Validation {
        epoch,
        cases: reports,
        summary,
    }))
}

fn checkpoint(net: &Network, dir: &Path, name: &str, epoch: usize, record: &mut RunRecord) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join(name);
    let mut meta = KeyValues::default();
    meta.set("epoch", epoch);
    meta.set("patch_size", record.config.patch_size);
    meta.set("patch_overlap", record.config.patch_overlap);
    save_checkpoint(net, &meta, &path)?;
    if !record.checkpoints.contains(&path) {
        record.checkpoints.push(path);
    }
    Ok(())
}

/// Train `net` in place. Each epoch draws one patch per training case in a
/// seeded shuffled order, steps Adam once per batch, then advances the
/// cosine schedule.
pub fn train(net: &mut Network, dataset: &Dataset, cfg: &TrainConfig) -> Result<RunRecord> {
    cfg.validate()?;
    if dataset.train.is_empty() {
        return Err(Error::Empty("training set".into()));
    }
    let mut echo = KeyValues::default();
    net.config().to_kv(&mut echo);
    let mut record = RunRecord {
        config: cfg.clone(),
        echo,
        epoch_losses: Vec::new(),
        lr_trace: Vec::new(),
        validation: Vec::new(),
        checkpoints: Vec::new(),
        skipped_patches: 0,
    };
    let mut adam = AdamState::new(net.params());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut best_dsc = f64::NEG_INFINITY;
    for epoch in 0..cfg.max_epochs {
        let lr = cosine_lr(epoch, cfg.max_epochs, cfg.initial_lr, cfg.lr_min);
        let mut order: Vec<usize> = (0..dataset.train.len()).collect();
        order.shuffle(&mut rng);
        let drawn = parallel::map_slice(&order, |&i| draw_sample(&dataset.train[i], cfg, mix_seed(cfg.seed, epoch, i)));
        let mut samples = Vec::with_capacity(drawn.len());
        for s in drawn {
            match s? {
                Some(s) => samples.push(s),
                None => record.skipped_patches += 1,
            }
        }
        let mut total = 0.0;
        let mut batches = 0usize;
        for batch in samples.chunks(cfg.batch_size) {
            match train_step(net, batch, cfg, lr, &mut adam) {
                Ok(l) => total += l,
                Err(e @ Error::NonFinite(_)) => {
                    if let Some(dir) = &cfg.checkpoint_dir {
                        checkpoint(net, dir, "nonfinite.ckpt", epoch + 1, &mut record)?;
                        record.write(dir)?;
                    }
                    return Err(Error::NonFinite(format!("epoch {}, batch {}: {e}", epoch + 1, batches + 1)));
                }
                Err(e) => return Err(e),
            }
            batches += 1;
        }
        let mean = if batches == 0 { f64::NAN } else { total / batches as f64 };
        log::info!("epoch {}/{} lr {lr:.6} loss {mean:.6}", epoch + 1, cfg.max_epochs);
        record.epoch_losses.push(mean);
        record.lr_trace.push(lr);
        let last = epoch + 1 == cfg.max_epochs;
        let due = (cfg.val_every > 0 && (epoch + 1) % cfg.val_every == 0) || last;
        if due {
            if let Some(v) = validate_cases(net, &dataset.validation, cfg, epoch + 1)? {
                log::info!("epoch {} validation dsc {:.4}", epoch + 1, v.summary.dsc.mean);
                if v.summary.dsc.mean > best_dsc {
                    best_dsc = v.summary.dsc.mean;
                    if let Some(dir) = &cfg.checkpoint_dir {
                        checkpoint(net, dir, "best.ckpt", epoch + 1, &mut record)?;
                    }
                }
                record.validation.push(v);
            }
        }
    }
    if let Some(dir) = &cfg.checkpoint_dir {
        checkpoint(net, dir, "final.ckpt", cfg.max_epochs, &mut record)?;
        record.write(dir)?;
    }
    Ok(record)
}

/// Foreground probabilities `[1, 2, D, H, W]` of an already preprocessed image,
/// by tiling, eval-mode forward per tile and averaging overlaps.
pub fn predict_prepared(net: &Network, image: &Volume, patch_size: usize, overlap: usize) -> Result<Tensor> {
    let origins = tile_origins(image.extents(), patch_size, overlap)?;
    let mut preds = Vec::with_capacity(origins.len());
    for &o in &origins {
        let p = crop_patch(image, None, o, patch_size)?;
        preds.push(net.predict(&p.image_tensor())?);
    }
    stitch_patches(&preds, &origins, image.extents())
}

/// Label prediction for an already preprocessed image.
pub fn infer_prepared(net: &Network, image: &Volume, patch_size: usize, overlap: usize) -> Result<LabelVolume> {
    let probs = predict_prepared(net, image, patch_size, overlap)?;
    argmax_labels(&probs, image.geometry)
}

/// Window and resample a raw HU volume the way training data was prepared.
pub fn prepare_image(hu: &Volume, pre: &PreprocessConfig) -> Result<Volume> {
    resample(&clamp_and_window(hu, pre), pre.target_spacing, Interp::Trilinear)
}

/// HU volume in, label volume at the target spacing out.
pub fn infer(net: &Network, hu: &Volume, pre: &PreprocessConfig) -> Result<LabelVolume> {
    pre.validate()?;
    infer_prepared(net, &prepare_image(hu, pre)?, pre.patch_size, pre.patch_overlap)
}
