//! Optimisation loop: augmentation, background batch assembly, per-epoch
//! validation and best-checkpoint retention.

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::mpsc::sync_channel;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::eval::{ConfusionMatrix, EvalError, MetricsReport};
use crate::model::{argmax_labels, center_window, Batch, HookNet, HookNetConfig, ModelError};
use crate::pyramid::{extract_mfmr_pair, LabelMask, Patch, PatchPair, PyramidError, PyramidImage};
use crate::sampling::{next_batch, AnnotationIndex, PixelLedger, SamplingError, SamplingPolicy};
use crate::tensor::{
    read_checkpoint, write_checkpoint, Adam, Checkpoint, CheckpointError, Graph, Mode, Renorm,
    Scalar, TensorError, BN_MOMENTUM,
};

pub const LOG_FILE: &str = "train_log.ndjson";
pub const BEST_CHECKPOINT: &str = "best.ckpt";

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training plan: {0}")]
    Plan(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Sampling(#[from] SamplingError),
    #[error(transparent)]
    Pyramid(#[from] PyramidError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("non-finite loss at step {0}")]
    NonFiniteLoss(u64),
    #[error("cannot resume: {0}")]
    Resume(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    /// Random flip/rot90 (one of the 8 dihedral transforms).
    pub dihedral: bool,
    /// Additive brightness shift amplitude, as a fraction of full scale.
    pub brightness: f64,
    /// Multiplicative contrast amplitude around mid-grey.
    pub contrast: f64,
    /// Hue rotation amplitude, as a fraction of half a turn.
    pub hue: f64,
    /// Gaussian noise standard deviation, as a fraction of full scale.
    pub noise_sigma: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            dihedral: true,
            brightness: 0.05,
            contrast: 0.1,
            hue: 0.02,
            noise_sigma: 0.02,
        }
    }
}

impl AugmentConfig {
    pub fn none() -> Self {
        Self {
            dihedral: false,
            brightness: 0.0,
            contrast: 0.0,
            hue: 0.0,
            noise_sigma: 0.0,
        }
    }

    fn photometric(&self) -> bool {
        self.brightness > 0.0 || self.contrast > 0.0 || self.hue > 0.0 || self.noise_sigma > 0.0
    }
}

/// Batch renormalization limits over training: plain batch-norm for
/// `warmup_steps`, then `r_max` and `d_max` grow linearly to their final
/// values over `ramp_steps`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RenormSchedule {
    pub warmup_steps: u64,
    pub ramp_steps: u64,
    pub r_max: f64,
    pub d_max: f64,
}

impl Default for RenormSchedule {
    fn default() -> Self {
        Self {
            warmup_steps: 100,
            ramp_steps: 500,
            r_max: 3.0,
            d_max: 5.0,
        }
    }
}

impl RenormSchedule {
    pub fn at(&self, step: u64) -> Renorm {
        let t = if step < self.warmup_steps {
            0.0
        } else if self.ramp_steps == 0 {
            1.0
        } else {
            ((step - self.warmup_steps) as f64 / self.ramp_steps as f64).min(1.0)
        };
        Renorm {
            r_max: 1.0 + t * (self.r_max - 1.0),
            d_max: t * self.d_max,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainPlan {
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub batch_size: usize,
    pub augment: AugmentConfig,
    pub policy: SamplingPolicy,
    pub seed: u64,
    /// Batches prepared ahead of the optimiser.
    pub queue_depth: usize,
    /// Keep every `epoch_{n}.ckpt` instead of only the latest.
    pub keep_epoch_checkpoints: bool,
    /// Batch renormalization for small batches; plain batch-norm when unset.
    pub renorm: Option<RenormSchedule>,
    /// Weight kept on the old batch-norm running estimate per step.
    pub bn_momentum: f64,
}

impl Default for TrainPlan {
    fn default() -> Self {
        Self {
            epochs: 30,
            steps_per_epoch: 100,
            batch_size: 1,
            augment: AugmentConfig::default(),
            policy: SamplingPolicy::PixelBalanced,
            seed: 0,
            queue_depth: 4,
            keep_epoch_checkpoints: false,
            renorm: Some(RenormSchedule::default()),
            bn_momentum: 0.99,
        }
    }
}

impl TrainPlan {
    /// Full-length schedule: 200 epochs of 1000 steps, batches of 12.
    pub fn full_scale() -> Self {
        Self {
            epochs: 200,
            steps_per_epoch: 1000,
            batch_size: 12,
            renorm: None,
            bn_momentum: BN_MOMENTUM,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        for (name, v) in [
            ("epochs", self.epochs),
            ("steps_per_epoch", self.steps_per_epoch),
            ("batch_size", self.batch_size),
            ("queue_depth", self.queue_depth),
        ] {
            if v == 0 {
                return Err(TrainError::Plan(format!("{name} must be positive")));
            }
        }
        let a = &self.augment;
        for (name, v) in [
            ("brightness", a.brightness),
            ("contrast", a.contrast),
            ("hue", a.hue),
            ("noise_sigma", a.noise_sigma),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(TrainError::Plan(format!(
                    "augment.{name} must lie in [0, 1], got {v}"
                )));
            }
        }
        if !(0.0..1.0).contains(&self.bn_momentum) {
            return Err(TrainError::Plan(format!(
                "bn_momentum must lie in [0, 1), got {}",
                self.bn_momentum
            )));
        }
        if let Some(r) = &self.renorm {
            if !(r.r_max >= 1.0 && r.d_max >= 0.0) {
                return Err(TrainError::Plan(format!(
                    "renorm needs r_max >= 1 and d_max >= 0, got {} and {}",
                    r.r_max, r.d_max
                )));
            }
        }
        Ok(())
    }

    pub fn total_steps(&self) -> u64 {
        (self.epochs * self.steps_per_epoch) as u64
    }
}

/// Source coordinates of destination pixel `(x, y)` under dihedral
/// transform `k` (`k % 4` quarter turns, preceded by a mirror when `k >= 4`).
fn dihedral_source(k: u8, m: usize, x: usize, y: usize) -> (usize, usize) {
    let (mut sx, mut sy) = (x, y);
    for _ in 0..k % 4 {
        (sx, sy) = (sy, m - 1 - sx);
    }
    if k >= 4 {
        sx = m - 1 - sx;
    }
    (sx, sy)
}

fn transform_plane<V: Copy>(values: &[V], m: usize, channels: usize, k: u8) -> Vec<V> {
    let mut out = Vec::with_capacity(values.len());
    for y in 0..m {
        for x in 0..m {
            let (sx, sy) = dihedral_source(k, m, x, y);
            let i = (sy * m + sx) * channels;
            out.extend_from_slice(&values[i..i + channels]);
        }
    }
    out
}

/// Applies dihedral transform `k` (0..8) to a patch; 0 is the identity.
pub fn dihedral_patch(p: &Patch, k: u8) -> Patch {
    if k % 8 == 0 {
        return p.clone();
    }
    let m = p.size;
    Patch {
        pixels: transform_plane(&p.pixels, m, 3, k % 8),
        valid: transform_plane(&p.valid, m, 1, k % 8),
        mask: transform_plane(&p.mask, m, 1, k % 8),
        ..p.clone()
    }
}

#[derive(Debug, Clone, Copy)]
struct ColourJitter {
    brightness: f64,
    contrast: f64,
    /// Hue rotation about the grey axis of RGB space.
    rotation: [[f64; 3]; 3],
}

impl ColourJitter {
    fn new(brightness: f64, contrast: f64, angle: f64) -> Self {
        let (c, s) = (angle.cos(), angle.sin());
        let k = 1.0 / 3f64.sqrt();
        let t = (1.0 - c) * k * k;
        let (a, b) = (c + t, t - s * k);
        let d = t + s * k;
        Self {
            brightness,
            contrast,
            rotation: [[a, b, d], [d, a, b], [b, d, a]],
        }
    }

    fn apply(&self, rgb: [f64; 3]) -> [f64; 3] {
        let centred = rgb.map(|v| v - 127.5);
        let mut out = [0.0; 3];
        for (o, row) in out.iter_mut().zip(&self.rotation) {
            let v: f64 = row.iter().zip(&centred).map(|(m, x)| m * x).sum();
            *o = v * self.contrast + 127.5 + self.brightness;
        }
        out
    }
}

fn photometric(
    pixels: &mut [u8],
    jitter: &ColourJitter,
    noise: Option<&Normal<f64>>,
    rng: &mut impl Rng,
) {
    for px in pixels.chunks_exact_mut(3) {
        let mut v = jitter.apply([px[0] as f64, px[1] as f64, px[2] as f64]);
        if let Some(n) = noise {
            for c in &mut v {
                *c += n.sample(rng);
            }
        }
        for (dst, c) in px.iter_mut().zip(v) {
            *dst = c.round().clamp(0.0, 255.0) as u8;
        }
    }
}

/// One shared dihedral transform on both patches and masks, then one colour
/// jitter for the pair and independent pixel noise. Masks are only permuted.
pub fn augment(pair: &PatchPair, config: &AugmentConfig, rng: &mut impl Rng) -> PatchPair {
    let k = if config.dihedral {
        rng.gen_range(0..8u8)
    } else {
        0
    };
    let mut out = PatchPair {
        center: pair.center,
        size: pair.size,
        target: dihedral_patch(&pair.target, k),
        context: dihedral_patch(&pair.context, k),
    };
    if config.photometric() {
        let sym =
            |rng: &mut dyn rand::RngCore, a: f64| if a > 0.0 { rng.gen_range(-a..=a) } else { 0.0 };
        let angle = sym(rng, config.hue) * std::f64::consts::PI;
        let jitter = ColourJitter::new(
            sym(rng, config.brightness) * 255.0,
            1.0 + sym(rng, config.contrast),
            angle,
        );
        let noise = (config.noise_sigma > 0.0)
            .then(|| Normal::new(0.0, config.noise_sigma * 255.0).expect("finite sigma"));
        photometric(&mut out.target.pixels, &jitter, noise.as_ref(), rng);
        photometric(&mut out.context.pixels, &jitter, noise.as_ref(), rng);
    }
    out
}

/// A pyramid with its (possibly sparse) level-0 annotation.
#[derive(Debug, Clone)]
pub struct Slide {
    pub image: PyramidImage,
    pub mask: LabelMask,
}

/// Training slides plus their candidate index.
#[derive(Debug, Clone)]
pub struct TrainingData<'a> {
    pub slides: &'a [Slide],
    pub index: AnnotationIndex,
}

impl<'a> TrainingData<'a> {
    pub fn new(slides: &'a [Slide], num_classes: usize, stride: usize) -> Result<Self, TrainError> {
        let masks: Vec<&LabelMask> = slides.iter().map(|s| &s.mask).collect();
        Ok(Self {
            slides,
            index: AnnotationIndex::build(&masks, num_classes, stride)?,
        })
    }
}

/// Random stream for one training step.
fn step_rng(seed: u64, step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step + 1);
    rng
}

/// Samples `count` concentric pairs with uniform class selection, for a
/// fixed validation set.
pub fn sample_pairs(
    data: &TrainingData<'_>,
    config: &HookNetConfig,
    count: usize,
    seed: u64,
) -> Result<Vec<PatchPair>, TrainError> {
    let res = config.extraction_pair().map_err(ModelError::from)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ledger = PixelLedger::new(data.index.num_classes());
    let picks = next_batch(
        &data.index,
        &ledger,
        &mut rng,
        count.max(1),
        SamplingPolicy::Uniform,
    )?;
    picks
        .into_iter()
        .take(count)
        .map(|(_, c)| {
            let s = &data.slides[c.slide as usize];
            Ok(extract_mfmr_pair(
                &s.image,
                &s.mask,
                (c.x, c.y),
                config.input_size,
                &res,
            )?)
        })
        .collect()
}

struct Prepared<T> {
    batch: Batch<T>,
    ledger: PixelLedger,
}

/// Samples, extracts and augments the batch of `step`, updating `ledger`
/// with its target output-window labels.
fn prepare_batch<T: Scalar>(
    data: &TrainingData<'_>,
    config: &HookNetConfig,
    out: usize,
    hooked: bool,
    plan: &TrainPlan,
    ledger: &mut PixelLedger,
    step: u64,
) -> Result<Batch<T>, TrainError> {
    let res = config.extraction_pair().map_err(ModelError::from)?;
    let m = config.input_size;
    let mut rng = step_rng(plan.seed, step);
    let picks = next_batch(&data.index, ledger, &mut rng, plan.batch_size, plan.policy)?;
    let mut pairs = Vec::with_capacity(picks.len());
    for (_, c) in picks {
        let s = &data.slides[c.slide as usize];
        let pair = extract_mfmr_pair(&s.image, &s.mask, (c.x, c.y), m, &res)?;
        pairs.push(augment(&pair, &plan.augment, &mut rng));
    }
    let windows: Vec<Vec<u8>> = pairs
        .iter()
        .map(|p| center_window(&p.target.mask, m, out))
        .collect();
    ledger.update(windows.iter().map(Vec::as_slice));
    Ok(Batch::from_pairs(&pairs, hooked, out)?)
}

/// Scores a model after each epoch.
pub trait Validator<T: Scalar> {
    fn validate(&mut self, model: &HookNet<T>) -> Result<MetricsReport, TrainError>;
}

/// Macro F1 of target-branch predictions over the output windows of a fixed
/// set of patch pairs.
#[derive(Debug, Clone)]
pub struct PatchValidator {
    pub pairs: Vec<PatchPair>,
    pub batch_size: usize,
}

impl<T: Scalar> Validator<T> for PatchValidator {
    fn validate(&mut self, model: &HookNet<T>) -> Result<MetricsReport, TrainError> {
        let out = model.output_size();
        let mut cm = ConfusionMatrix::new(model.config().num_classes);
        for chunk in self.pairs.chunks(self.batch_size.max(1)) {
            let batch = Batch::<T>::from_pairs(chunk, model.is_hooked(), out)?;
            let (probs, _) = model.predict(batch.target, batch.context)?;
            cm.accumulate(&argmax_labels(&probs), &batch.target_mask)?;
        }
        Ok(cm.report()?)
    }
}

/// Retains the first strictly highest score.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct BestTracker {
    pub best: Option<(usize, f64)>,
}

impl BestTracker {
    /// Records `score` for `epoch`; true when it is a new best.
    pub fn observe(&mut self, epoch: usize, score: f64) -> bool {
        let better = score.is_finite() && self.best.map_or(true, |(_, b)| score > b);
        if better {
            self.best = Some((epoch, score));
        }
        better
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LogRecord {
    Step {
        epoch: usize,
        step: u64,
        loss: f64,
        target_ce: f64,
        context_ce: Option<f64>,
        l2: f64,
    },
    Epoch {
        epoch: usize,
        mean_loss: f64,
        val_macro_f1: f64,
        val_per_class_f1: Vec<Option<f64>>,
        ledger: Vec<u64>,
        is_best: bool,
    },
}

impl LogRecord {
    fn epoch(&self) -> usize {
        match self {
            LogRecord::Step { epoch, .. } | LogRecord::Epoch { epoch, .. } => *epoch,
        }
    }
}

/// State stored in checkpoint metadata so a run can resume exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub epoch: usize,
    pub ledger: PixelLedger,
    pub best: BestTracker,
    pub model: HookNetConfig,
    pub plan: TrainPlan,
}

#[derive(Debug, Clone, Default)]
pub struct FitOptions {
    /// Directory for the log and checkpoints; nothing is written when unset.
    pub run_dir: Option<PathBuf>,
    /// Continue from the latest `epoch_{n}.ckpt` in `run_dir`.
    pub resume: bool,
}

#[derive(Debug, Clone)]
pub struct FitReport<T> {
    pub best_epoch: usize,
    pub best_score: f64,
    pub best: Checkpoint<T>,
    pub epochs: Vec<LogRecord>,
    pub ledger: PixelLedger,
}

pub fn epoch_checkpoint_name(epoch: usize) -> String {
    format!("epoch_{epoch}.ckpt")
}

fn latest_epoch_checkpoint(dir: &Path) -> Result<Option<(usize, PathBuf)>, TrainError> {
    let mut best: Option<(usize, PathBuf)> = None;
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("");
        if let Some(n) = name
            .strip_prefix("epoch_")
            .and_then(|s| s.strip_suffix(".ckpt"))
        {
            if let Ok(e) = n.parse::<usize>() {
                if best.as_ref().map_or(true, |(b, _)| e > *b) {
                    best = Some((e, path));
                }
            }
        }
    }
    Ok(best)
}

/// Keeps the log lines of epochs up to `epoch`, byte for byte.
fn truncate_log(path: &Path, epoch: usize) -> Result<Vec<LogRecord>, TrainError> {
    let mut kept = Vec::new();
    let mut lines = Vec::new();
    if path.exists() {
        for line in BufReader::new(File::open(path)?).lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: LogRecord = serde_json::from_str(&line)?;
            if rec.epoch() <= epoch {
                kept.push(rec);
                lines.push(line);
            }
        }
    }
    let mut w = BufWriter::new(File::create(path)?);
    for line in &lines {
        w.write_all(line.as_bytes())?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(kept)
}

/// Trains `model` for `plan`, validating after every epoch. On return the
/// model holds the weights of the best epoch.
pub fn fit<T: Scalar>(
    model: &mut HookNet<T>,
    data: &TrainingData<'_>,
    validator: &mut dyn Validator<T>,
    plan: &TrainPlan,
    options: &FitOptions,
    mut observer: impl FnMut(&LogRecord),
) -> Result<FitReport<T>, TrainError> {
    plan.validate()?;
    let config = model.config().clone();
    if data.index.num_classes() != config.num_classes {
        return Err(TrainError::Plan(format!(
            "data has {} classes, model {}",
            data.index.num_classes(),
            config.num_classes
        )));
    }
    let mut adam = Adam::new(config.learning_rate);
    let mut ledger = PixelLedger::new(config.num_classes);
    let mut tracker = BestTracker::default();
    let mut start_epoch = 1;
    let mut epoch_records = Vec::new();
    let mut best: Option<Checkpoint<T>> = None;

    let mut log = None;
    if let Some(dir) = &options.run_dir {
        fs::create_dir_all(dir)?;
        let log_path = dir.join(LOG_FILE);
        let resumed = if options.resume {
            latest_epoch_checkpoint(dir)?
        } else {
            None
        };
        match resumed {
            Some((epoch, path)) => {
                let ckpt: Checkpoint<T> = read_checkpoint(&path)?;
                let state: TrainState = serde_json::from_str(&ckpt.metadata)?;
                if state.model != config || state.plan != *plan {
                    return Err(TrainError::Resume(format!(
                        "{} was written by a different configuration",
                        path.display()
                    )));
                }
                ckpt.restore(&mut model.store)?;
                adam = ckpt.optimizer.clone();
                ledger = state.ledger;
                tracker = state.best;
                start_epoch = epoch + 1;
                if tracker.best.is_some() {
                    best = Some(read_checkpoint(&dir.join(BEST_CHECKPOINT))?);
                }
                epoch_records = truncate_log(&log_path, epoch)?
                    .into_iter()
                    .filter(|r| matches!(r, LogRecord::Epoch { .. }))
                    .collect();
            }
            None => {
                File::create(&log_path)?;
            }
        }
        log = Some(BufWriter::new(
            OpenOptions::new().append(true).open(&log_path)?,
        ));
    }

    let out = model.output_size();
    let hooked = model.is_hooked();
    let first_step = ((start_epoch - 1) * plan.steps_per_epoch) as u64;
    let total = plan.total_steps();
    let producer_ledger = ledger.clone();

    std::thread::scope(|scope| -> Result<(), TrainError> {
        let (tx, rx) = sync_channel::<Result<Prepared<T>, TrainError>>(plan.queue_depth);
        let cfg = &config;
        scope.spawn(move || {
            let mut ledger = producer_ledger;
            for step in first_step..total {
                let item =
                    prepare_batch(data, cfg, out, hooked, plan, &mut ledger, step).map(|batch| {
                        Prepared {
                            batch,
                            ledger: ledger.clone(),
                        }
                    });
                let failed = item.is_err();
                if tx.send(item).is_err() || failed {
                    break;
                }
            }
        });

        let mut step = first_step;
        for epoch in start_epoch..=plan.epochs {
            let mut loss_sum = 0.0;
            for _ in 0..plan.steps_per_epoch {
                let prepared = rx
                    .recv()
                    .map_err(|_| TrainError::Plan("batch producer stopped".into()))??;
                ledger = prepared.ledger;
                let batch = prepared.batch;
                let mut g = Graph::new();
                g.set_renorm(plan.renorm.as_ref().map(|r| r.at(step)));
                let fwd = model.forward(&mut g, batch.target, batch.context, Mode::Train)?;
                let terms = model.loss(
                    &mut g,
                    &fwd,
                    &batch.target_mask,
                    batch.context_mask.as_deref(),
                )?;
                let loss = g.scalar(terms.total).to_f64();
                if !loss.is_finite() {
                    return Err(TrainError::NonFiniteLoss(step));
                }
                model.store.zero_grad();
                g.backward(terms.total, &mut model.store)?;
                adam.step(&mut model.store);
                g.commit_running_stats_with(&mut model.store, plan.bn_momentum);
                let rec = LogRecord::Step {
                    epoch,
                    step,
                    loss,
                    target_ce: g.scalar(terms.target_ce).to_f64(),
                    context_ce: terms.context_ce.map(|v| g.scalar(v).to_f64()),
                    l2: g.scalar(terms.l2).to_f64(),
                };
                if let Some(w) = log.as_mut() {
                    serde_json::to_writer(&mut *w, &rec)?;
                    w.write_all(b"\n")?;
                }
                observer(&rec);
                loss_sum += loss;
                step += 1;
            }

            let report = validator.validate(model)?;
            let is_best = tracker.observe(epoch, report.macro_f1);
            let state = TrainState {
                epoch,
                ledger: ledger.clone(),
                best: tracker,
                model: config.clone(),
                plan: plan.clone(),
            };
            let ckpt = Checkpoint::capture(
                &model.store,
                adam.clone(),
                step,
                serde_json::to_string(&state)?,
            );
            if let Some(dir) = &options.run_dir {
                if is_best {
                    write_checkpoint(&dir.join(BEST_CHECKPOINT), &ckpt)?;
                }
                write_checkpoint(&dir.join(epoch_checkpoint_name(epoch)), &ckpt)?;
                if !plan.keep_epoch_checkpoints && epoch > 1 {
                    let previous = dir.join(epoch_checkpoint_name(epoch - 1));
                    if previous.exists() {
                        fs::remove_file(previous)?;
                    }
                }
            }
            if is_best {
                best = Some(ckpt);
            }
            let rec = LogRecord::Epoch {
                epoch,
                mean_loss: loss_sum / plan.steps_per_epoch as f64,
                val_macro_f1: report.macro_f1,
                val_per_class_f1: report.per_class_f1,
                ledger: ledger.counts().to_vec(),
                is_best,
            };
            if let Some(w) = log.as_mut() {
                serde_json::to_writer(&mut *w, &rec)?;
                w.write_all(b"\n")?;
                w.flush()?;
            }
            observer(&rec);
            epoch_records.push(rec);
        }
        Ok(())
    })?;

    let best =
        best.ok_or_else(|| TrainError::Plan("no epoch produced a finite validation score".into()))?;
    best.restore(&mut model.store)?;
    let (best_epoch, best_score) = tracker.best.expect("best checkpoint implies a best score");
    Ok(FitReport {
        best_epoch,
        best_score,
        best,
        epochs: epoch_records,
        ledger,
    })
}
