//! Joint optimization of all enabled streams: batch preparation, the
//! training step, the cosine schedule, checkpoints and feature extraction.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::backbone::{backbone_infer, load_matching, Backbone, BackboneConfig, Variant};
use crate::cad::{CadStream, TrunkConfig};
use crate::checkpoint::{Checkpoint, CheckpointKind};
use crate::dataio::{DatasetSplit, PkSampler};
use crate::encoder::{compose_foreground, compose_shielding, degrade_clothing, derive_masks, multiscale_targets_at, ClassPartition};
use crate::error::{io_err, IgclError, Result};
use crate::losses::{
    classification_loss, highlevel_collab_loss, midlevel_collab_loss, total_loss, triplet_loss, HeadLogits, LossReport, LossTerms,
    LossWeights, SpreadStat,
};
use crate::nn::{stack_images, Ctx, ParamStore};
use crate::pie::PieStream;
use crate::saj::{apply_jigsaw, plan_jigsaw, saj_forward};
use crate::tensor::Array;
use crate::types::{seeded_rng, Batch, FeatureVector, ImageSample, ImageTensor, RngSeed};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StreamToggles {
    pub cad: bool,
    pub saj: bool,
    pub pie: bool,
}

impl Default for StreamToggles {
    fn default() -> Self {
        Self { cad: true, saj: true, pie: true }
    }
}

impl StreamToggles {
    pub const BASELINE: StreamToggles = StreamToggles { cad: false, saj: false, pie: false };
}

/// Input of the identity enhancement stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShieldingMode {
    /// The original image.
    Orig,
    /// The original image with upper clothes painted white.
    OrigShield,
    /// The foreground image with upper clothes painted white.
    #[default]
    FgShield,
}

impl std::str::FromStr for ShieldingMode {
    type Err = IgclError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "orig" => Ok(Self::Orig),
            "orig_shield" => Ok(Self::OrigShield),
            "fg_shield" => Ok(Self::FgShield),
            _ => Err(IgclError::InvalidArgument(format!("unknown shielding mode {s:?} (orig, orig_shield, fg_shield)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub variant: Variant,
    pub epochs: usize,
    /// Stop after this many steps instead of `epochs` full epochs.
    pub max_steps: Option<usize>,
    pub base_lr: f64,
    pub lr_floor: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub alpha: f64,
    pub weights: LossWeights,
    pub streams: StreamToggles,
    pub jigsaw: bool,
    pub shielding: ShieldingMode,
    /// Also apply the triplet loss to the identity enhancement feature.
    pub pie_triplet: bool,
    pub spread: SpreadStat,
    pub partition: ClassPartition,
    pub p: usize,
    pub k: usize,
    pub seed: RngSeed,
    /// Keep a numbered checkpoint every this many epochs (0: only `last.ckpt`).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Full,
            epochs: 60,
            max_steps: None,
            base_lr: 7e-4,
            lr_floor: 0.0,
            momentum: 0.9,
            weight_decay: 5e-4,
            alpha: 0.1,
            weights: LossWeights::default(),
            streams: StreamToggles::default(),
            jigsaw: true,
            shielding: ShieldingMode::default(),
            pie_triplet: false,
            spread: SpreadStat::default(),
            partition: ClassPartition::default(),
            p: 8,
            k: 4,
            seed: RngSeed(0),
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    /// Desk-scale preset: tiny backbone and trunk, P=4, K=4.
    pub fn tiny() -> Self {
        Self { variant: Variant::Tiny, base_lr: 0.02, p: 4, k: 4, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(IgclError::InvalidArgument(m.to_string()));
        if self.epochs == 0 {
            return bad("epochs must be at least 1");
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return bad("learning rate must be positive");
        }
        if !(0.0..=self.base_lr).contains(&self.lr_floor) {
            return bad("learning rate floor must lie in [0, base lr]");
        }
        if !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 {
            return bad("momentum must lie in [0, 1) and weight decay be non-negative");
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return bad("alpha must lie in [0, 1]");
        }
        if self.p == 0 || self.k == 0 {
            return bad("P and K must be positive");
        }
        if self.max_steps == Some(0) {
            return bad("step limit must be positive");
        }
        self.weights.validate()?;
        self.partition.validate()
    }

    pub fn model_config(&self, num_classes: usize) -> ModelConfig {
        ModelConfig {
            backbone: BackboneConfig::for_variant(self.variant, num_classes),
            trunk: TrunkConfig::for_variant(self.variant, num_classes),
            streams: self.streams,
        }
    }

    pub fn input_size(&self) -> (usize, usize) {
        let b = BackboneConfig::for_variant(self.variant, 1);
        (b.input_height, b.input_width)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub trunk: TrunkConfig,
    pub streams: StreamToggles,
}

/// `floor + (base − floor)·(1 + cos(π·t/T))/2`.
pub fn cosine_lr(step: usize, total_steps: usize, base_lr: f64, floor: f64) -> f64 {
    if total_steps == 0 {
        return base_lr;
    }
    let t = step.min(total_steps) as f64 / total_steps as f64;
    floor + (base_lr - floor) * (1.0 + (std::f64::consts::PI * t).cos()) / 2.0
}

/// Per-sample stream inputs, computed once per training run.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedSample {
    pub original: ImageTensor,
    pub foreground: ImageTensor,
    pub pie_input: ImageTensor,
    /// Degraded targets, `h × w` each.
    pub targets: [Array; 3],
}

pub fn prepare_sample(sample: &ImageSample, config: &TrainConfig) -> Result<PreparedSample> {
    let (h, w) = config.input_size();
    let s = if sample.image.size() == (h, w) { sample.clone() } else { sample.resized(h, w) };
    let image = if s.image.channels() == 3 {
        s.image
    } else {
        ImageTensor::from_fn(h, w, 3, |y, x, _| s.image.get(y, x, 0))?
    };
    let masks = derive_masks(&s.parse, &config.partition);
    let foreground = compose_foreground(&image, &masks)?;
    let pie_input = match config.shielding {
        ShieldingMode::Orig => image.clone(),
        ShieldingMode::OrigShield => compose_shielding(&image, &masks)?,
        ShieldingMode::FgShield => compose_shielding(&foreground, &masks)?,
    };
    let targets = multiscale_targets_at(&degrade_clothing(&image, &masks, config.alpha)?, (h, w))?.0;
    Ok(PreparedSample { original: image, foreground, pie_input, targets })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Progress {
    pub step: usize,
    pub epoch: usize,
    /// Batches of `epoch` already consumed.
    pub batch_in_epoch: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TrainingMeta {
    train: TrainConfig,
    model: ModelConfig,
    progress: Progress,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct InferenceMeta {
    backbone: BackboneConfig,
}

const BACKBONE: &str = "backbone";
const CAD: &str = "cad";
const PIE: &str = "pie";

/// Model weights, optimizer state and progress of a training run.
pub struct Trainer {
    pub config: TrainConfig,
    pub model: ModelConfig,
    pub store: ParamStore,
    pub momentum: BTreeMap<String, Array>,
    pub progress: Progress,
    backbone: Backbone,
    cad: Option<CadStream>,
    pie: Option<PieStream>,
}

impl Trainer {
    fn assemble(config: TrainConfig, model: ModelConfig, store: ParamStore) -> Result<Self> {
        config.validate()?;
        let backbone = Backbone::new(BACKBONE, model.backbone.clone())?;
        let cad = model.streams.cad.then(|| CadStream::new(CAD, model.trunk.clone())).transpose()?;
        let pie = model.streams.pie.then(|| PieStream::new(PIE, model.backbone.clone())).transpose()?;
        Ok(Self { config, model, store, momentum: BTreeMap::new(), progress: Progress::default(), backbone, cad, pie })
    }

    /// Fresh seeded weights for every enabled stream.
    pub fn new(config: TrainConfig, num_classes: usize) -> Result<Self> {
        let model = config.model_config(num_classes);
        let mut t = Self::assemble(config, model, ParamStore::new())?;
        let seed = t.config.seed;
        let mut store = ParamStore::new();
        t.backbone.init(&mut store, seed.derive("init.backbone", 0));
        if let Some(cad) = &t.cad {
            cad.init(&mut store, seed.derive("init.cad", 0));
        }
        if let Some(pie) = &t.pie {
            pie.init(&mut store, seed.derive("init.pie", 0));
        }
        t.store = store;
        Ok(t)
    }

    /// Overlays pretrained backbone weights (classifier excluded); the
    /// identity enhancement backbone starts from the same weights.
    pub fn load_pretrained(&mut self, path: &Path) -> Result<usize> {
        let source = Checkpoint::load(path)?.store;
        let mut n = load_matching(&mut self.store, &source, "backbone.", &[self.backbone.classifier_name()])?;
        if let Some(pie) = &self.pie {
            let mut renamed = ParamStore::new();
            for (k, v) in source.params() {
                if let Some(rest) = k.strip_prefix("backbone.") {
                    renamed.insert_param(format!("{}.{rest}", pie.backbone.prefix), v.clone());
                }
            }
            n += load_matching(&mut self.store, &renamed, &pie.backbone.prefix, &[pie.backbone.classifier_name()])?;
        }
        Ok(n)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let meta: TrainingMeta = serde_json::from_value(ck.header.meta.clone()).map_err(|e| IgclError::Checkpoint {
            path: PathBuf::new(),
            reason: format!("not a training checkpoint: {e}"),
        })?;
        let mut fresh = Self::new(meta.train.clone(), meta.model.backbone.num_classes)?;
        if fresh.model != meta.model {
            return Err(IgclError::InvalidArgument("checkpoint model configuration does not match its training configuration".into()));
        }
        for (name, value) in fresh.store.params().iter().chain(fresh.store.buffers()) {
            let found = ck.store.param(name).or_else(|| ck.store.buffer(name)).ok_or_else(|| IgclError::Checkpoint {
                path: PathBuf::new(),
                reason: format!("missing tensor {name}"),
            })?;
            if found.shape() != value.shape() {
                return Err(IgclError::TensorShape { name: name.clone(), expected: value.shape().to_vec(), found: found.shape().to_vec() });
            }
        }
        fresh.store = ck.store.clone();
        fresh.momentum = ck.momentum.clone();
        fresh.progress = meta.progress;
        Ok(fresh)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let meta = TrainingMeta { train: self.config.clone(), model: self.model.clone(), progress: self.progress };
        let mut ck = Checkpoint::new(CheckpointKind::Training, serde_json::to_value(meta).expect("serializable"), self.store.clone());
        ck.momentum = self.momentum.clone();
        ck
    }

    /// Backbone weights only: the auxiliary streams are training-time only.
    pub fn inference_checkpoint(&self) -> Checkpoint {
        let mut store = self.store.clone();
        store.retain_prefixes(&["backbone."]);
        let meta = InferenceMeta { backbone: self.model.backbone.clone() };
        Checkpoint::new(CheckpointKind::Inference, serde_json::to_value(meta).expect("serializable"), store)
    }

    /// One SGD-with-momentum update over the sum of the enabled losses.
    pub fn train_step(&mut self, samples: &[PreparedSample], batch: &Batch, lr: f64) -> Result<LossReport> {
        batch.validate()?;
        let step = self.progress.step;
        let cfg = &self.config;
        let pick = |f: fn(&PreparedSample) -> &ImageTensor| -> Result<Vec<ImageTensor>> {
            batch
                .indices
                .iter()
                .map(|&i| samples.get(i).map(|s| f(s).clone()).ok_or_else(|| IgclError::InvalidArgument(format!("batch index {i} out of range"))))
                .collect()
        };
        let labels = &batch.labels;
        let g = Graph::new();
        let ctx = Ctx::new(&g, &self.store, true);
        let ori_images = g.constant(stack_images(&pick(|s| &s.original)?)?);
        let ori = self.backbone.forward(&ctx, ori_images)?;

        let sem = if cfg.streams.saj {
            let fg = pick(|s| &s.foreground)?;
            let fg = if cfg.jigsaw { apply_jigsaw(&fg, &plan_jigsaw(batch, fg[0].height()))? } else { fg };
            ctx.set_track_stats(false);
            let out = saj_forward(&ctx, &self.backbone, g.constant(stack_images(&fg)?))?;
            ctx.set_track_stats(true);
            Some(out)
        } else {
            None
        };
        let cad = match &self.cad {
            Some(stream) => Some(stream.forward(&ctx, ori_images)?),
            None => None,
        };
        let pie = match &self.pie {
            Some(stream) => Some(stream.forward(&ctx, g.constant(stack_images(&pick(|s| &s.pie_input)?)?))?),
            None => None,
        };

        let heads = HeadLogits { ori: ori.logits, sem: sem.map(|s| s.logits), pie: pie.map(|p| p.out.logits), deg: cad.map(|c| c.logits) };
        let mut trip_rng = seeded_rng(cfg.seed.derive("triplet", step as u64));
        let x_pie = if cfg.pie_triplet { pie.map(|p| p.out.feature) } else { None };
        let mcl = match &cad {
            Some(c) => {
                let targets: Vec<Array> = (0..3)
                    .map(|k| {
                        let parts: Vec<&Array> = batch.indices.iter().map(|&i| &samples[i].targets[k]).collect();
                        let s = parts[0].shape().to_vec();
                        Array::new([parts.len(), s[0], s[1]], parts.iter().flat_map(|a| a.data().iter().copied()).collect())
                    })
                    .collect();
                Some(midlevel_collab_loss(&c.attention, &[targets[0].clone(), targets[1].clone(), targets[2].clone()])?)
            }
            None => None,
        };
        let terms = LossTerms {
            cls: classification_loss(&heads, labels)?,
            tri: triplet_loss(ori.feature, sem.map(|s| s.feature), x_pie, labels, cfg.weights.margin, &mut trip_rng)?,
            mcl,
            hcl: highlevel_collab_loss(sem.map(|s| s.feature), cad.map(|c| c.x_deg), ori.feature, cfg.spread)?,
        };
        let (total, report) = total_loss(&terms, &cfg.weights);
        for (term, value) in report.scalars() {
            if !value.is_finite() {
                return Err(IgclError::NonFiniteLoss { term, step });
            }
        }
        let grads = g.backward(total).by_param();
        let updates = ctx.take_buffer_updates();
        drop(ctx);

        let (mu, wd) = (cfg.momentum, cfg.weight_decay);
        for (name, w) in self.store.params_mut() {
            let Some(grad) = grads.get(name) else { continue };
            let v = self.momentum.entry(name.clone()).or_insert_with(|| Array::zeros(w.shape().to_vec()));
            for ((vi, wi), gi) in v.data_mut().iter_mut().zip(w.data_mut()).zip(grad.data()) {
                *vi = mu * *vi + gi + wd * *wi;
                *wi -= lr * *vi;
            }
        }
        for (name, value) in updates {
            self.store.insert_buffer(name, value);
        }
        Ok(report)
    }
}

/// One training-log line.
#[derive(Debug, Clone, PartialEq)]
pub struct LogRecord {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub report: LossReport,
}

impl LogRecord {
    /// `step epoch lr cls tri mcl hcl total`, tab separated.
    pub fn to_line(&self) -> String {
        let r = &self.report;
        format!("{}\t{}\t{:.9e}\t{:.12e}\t{:.12e}\t{:.12e}\t{:.12e}\t{:.12e}", self.step, self.epoch, self.lr, r.cls, r.tri, r.mcl, r.hcl, r.total)
    }
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Where the log and checkpoints go; nothing is written when `None`.
    pub out_dir: Option<PathBuf>,
    pub resume: Option<Checkpoint>,
    pub pretrained: Option<PathBuf>,
}

pub struct TrainOutcome {
    pub trainer: Trainer,
    /// Records of the steps run by this call.
    pub log: Vec<LogRecord>,
}

pub const LOG_FILE: &str = "train_log.tsv";
pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const INFERENCE_CHECKPOINT: &str = "inference.ckpt";

pub fn epoch_checkpoint_name(epoch: usize) -> String {
    format!("epoch_{epoch:03}.ckpt")
}

/// Trains on `train` for the configured epochs or step limit, optionally
/// resuming from a training checkpoint.
pub fn run_training(config: &TrainConfig, train: &DatasetSplit, options: RunOptions) -> Result<TrainOutcome> {
    config.validate()?;
    let sampler = PkSampler::new(train, config.p, config.k)?;
    let per_epoch = sampler.batches_per_epoch();
    let total = config.max_steps.unwrap_or(config.epochs * per_epoch);
    let prepared = train.samples.iter().map(|s| prepare_sample(s, config)).collect::<Result<Vec<_>>>()?;
    let num_classes = train.identities().last().map_or(0, |&m| m + 1);

    let mut trainer = match &options.resume {
        Some(ck) => {
            let t = Trainer::from_checkpoint(ck)?;
            if t.config != *config {
                return Err(IgclError::InvalidArgument("resume configuration differs from the checkpoint's".into()));
            }
            t
        }
        None => {
            let mut t = Trainer::new(config.clone(), num_classes)?;
            if let Some(p) = &options.pretrained {
                t.load_pretrained(p)?;
            }
            t
        }
    };
    if trainer.model.backbone.num_classes != num_classes {
        return Err(IgclError::InvalidArgument(format!(
            "model has {} classes, training split has {num_classes}",
            trainer.model.backbone.num_classes
        )));
    }

    let mut log_file = match &options.out_dir {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(io_err(dir))?;
            let path = dir.join(LOG_FILE);
            Some(open_log(&path, options.resume.is_some())?)
        }
        None => None,
    };
    let save = |trainer: &Trainer, name: &str| -> Result<()> {
        match &options.out_dir {
            Some(dir) => trainer.checkpoint().save(&dir.join(name)),
            None => Ok(()),
        }
    };

    let mut log = Vec::new();
    while trainer.progress.step < total {
        let epoch = trainer.progress.epoch;
        let batches = sampler.epoch(&mut seeded_rng(config.seed.derive("epoch", epoch as u64)));
        for batch in batches.iter().skip(trainer.progress.batch_in_epoch) {
            if trainer.progress.step >= total {
                break;
            }
            let lr = cosine_lr(trainer.progress.step, total, config.base_lr, config.lr_floor);
            let report = trainer.train_step(&prepared, batch, lr)?;
            let record = LogRecord { step: trainer.progress.step, epoch, lr, report };
            if let (Some(f), Some(dir)) = (log_file.as_mut(), &options.out_dir) {
                writeln!(f, "{}", record.to_line()).map_err(io_err(dir.join(LOG_FILE)))?;
            }
            log.push(record);
            trainer.progress.step += 1;
            trainer.progress.batch_in_epoch += 1;
        }
        if trainer.progress.batch_in_epoch >= batches.len() {
            trainer.progress.epoch += 1;
            trainer.progress.batch_in_epoch = 0;
            save(&trainer, LAST_CHECKPOINT)?;
            let e = trainer.progress.epoch;
            if config.checkpoint_every > 0 && e % config.checkpoint_every == 0 {
                save(&trainer, &epoch_checkpoint_name(e))?;
            }
        }
    }
    save(&trainer, LAST_CHECKPOINT)?;
    if let Some(dir) = &options.out_dir {
        trainer.inference_checkpoint().save(&dir.join(INFERENCE_CHECKPOINT))?;
    }
    Ok(TrainOutcome { trainer, log })
}

fn open_log(path: &Path, append: bool) -> Result<File> {
    if append {
        OpenOptions::new().append(true).create(true).open(path).map_err(io_err(path))
    } else {
        File::create(path).map_err(io_err(path))
    }
}

/// Backbone-only model used at test time.
pub struct InferenceModel {
    pub backbone: Backbone,
    pub store: ParamStore,
}

impl InferenceModel {
    /// Accepts training and inference checkpoints; only `backbone.*`
    /// tensors are read.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let config: BackboneConfig = match ck.header.kind {
            CheckpointKind::Inference => serde_json::from_value::<InferenceMeta>(ck.header.meta.clone())?.backbone,
            CheckpointKind::Training => serde_json::from_value::<TrainingMeta>(ck.header.meta.clone())?.model.backbone,
        };
        let backbone = Backbone::new(BACKBONE, config)?;
        let mut expected = ParamStore::new();
        backbone.init(&mut expected, RngSeed(0));
        let mut store = ParamStore::new();
        for (name, value) in expected.params() {
            let found = ck.store.param(name).ok_or_else(|| IgclError::Checkpoint { path: PathBuf::new(), reason: format!("missing tensor {name}") })?;
            if found.shape() != value.shape() {
                return Err(IgclError::TensorShape { name: name.clone(), expected: value.shape().to_vec(), found: found.shape().to_vec() });
            }
            store.insert_param(name.clone(), found.clone());
        }
        for name in expected.buffers().keys() {
            let found = ck.store.buffer(name).ok_or_else(|| IgclError::Checkpoint { path: PathBuf::new(), reason: format!("missing tensor {name}") })?;
            store.insert_buffer(name.clone(), found.clone());
        }
        Ok(Self { backbone, store })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?).map_err(|e| match e {
            IgclError::Checkpoint { reason, .. } => IgclError::Checkpoint { path: path.to_path_buf(), reason },
            other => other,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.backbone.config
    }

    /// Retrieval features (bottleneck output) of images of any size;
    /// images are resized to the model input.
    pub fn extract(&self, images: &[ImageTensor]) -> Result<Vec<FeatureVector>> {
        let (h, w) = (self.config().input_height, self.config().input_width);
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(16) {
            let resized: Vec<ImageTensor> = chunk
                .iter()
                .map(|img| {
                    let img = if img.size() == (h, w) { img.clone() } else { img.resize(h, w) };
                    if img.channels() == 3 {
                        Ok(img)
                    } else {
                        ImageTensor::from_fn(h, w, 3, |y, x, _| img.get(y, x, 0))
                    }
                })
                .collect::<Result<_>>()?;
            out.extend(backbone_infer(&self.backbone, &self.store, &resized)?.into_iter().map(|o| o.feature));
        }
        Ok(out)
    }
}

/// Retrieval features of samples using only the backbone weights.
pub fn extract_features(model: &InferenceModel, samples: &[ImageSample]) -> Result<Vec<FeatureVector>> {
    let images: Vec<ImageTensor> = samples.iter().map(|s| s.image.clone()).collect();
    model.extract(&images)
}
