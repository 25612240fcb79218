use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context as _};
use clap::Args;
use hooknet_core::pyramid::load_meta;
use hooknet_core::sampling::Candidate;
use hooknet_core::training::{
    sample_pairs, LogRecord, PatchValidator, Slide, BEST_CHECKPOINT, LOG_FILE,
};
use hooknet_core::{
    fit, load_pyramid, AnnotationIndex, FitOptions, HookNet, LabelMask, Scalar, TrainingData,
};
use serde::Serialize;
use serde_json::json;

use crate::config::{Precision, RunConfig};
use crate::Context;

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Run directory for config, logs and checkpoints.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Continue from the latest epoch checkpoint in the run directory.
    #[arg(long)]
    resume: bool,
    /// Training pyramid directories (repeatable).
    #[arg(long = "train")]
    train: Vec<PathBuf>,
    /// Validation pyramid directories (repeatable).
    #[arg(long = "validation")]
    validation: Vec<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
}

/// Reproducibility record written next to the resolved config.
#[derive(Debug, Serialize)]
struct RunRecord {
    seed: u64,
    precision: Precision,
    tool_version: &'static str,
    train: Vec<PathBuf>,
    validation: Vec<PathBuf>,
}

pub const INDEX_PREFIX: &str = "index";

/// Sidecar file caching the candidate index of one pyramid.
pub fn index_sidecar(dir: &Path, num_classes: usize, stride: usize) -> PathBuf {
    dir.join(format!("{INDEX_PREFIX}_k{num_classes}_s{stride}.bin"))
}

fn is_fresh(sidecar: &Path, source: &Path) -> bool {
    let modified = |p: &Path| fs::metadata(p).and_then(|m| m.modified()).ok();
    match (modified(sidecar), modified(source)) {
        (Some(s), Some(m)) => s >= m,
        _ => false,
    }
}

/// Index of one slide, read from its sidecar or built and cached.
fn slide_index(
    dir: &Path,
    mask: &LabelMask,
    num_classes: usize,
    stride: usize,
) -> anyhow::Result<AnnotationIndex> {
    let meta = load_meta(dir)?;
    let mask_path = dir.join(meta.mask_file.as_deref().unwrap_or("mask.png"));
    let sidecar = index_sidecar(dir, num_classes, stride);
    if is_fresh(&sidecar, &mask_path) {
        if let Ok(index) = AnnotationIndex::load(&sidecar) {
            if index.num_classes() == num_classes {
                return Ok(index);
            }
        }
    }
    let index = AnnotationIndex::build(&[mask], num_classes, stride)?;
    // A read-only dataset simply goes uncached.
    let _ = index.save(&sidecar);
    Ok(index)
}

fn load_slides(
    dirs: &[PathBuf],
    num_classes: usize,
    stride: usize,
) -> anyhow::Result<(Vec<Slide>, AnnotationIndex)> {
    let mut slides = Vec::with_capacity(dirs.len());
    let mut merged: Vec<Vec<Candidate>> = vec![Vec::new(); num_classes];
    for (i, dir) in dirs.iter().enumerate() {
        let (image, mask, meta) =
            load_pyramid(dir).with_context(|| format!("loading {}", dir.display()))?;
        let Some(mask) = mask else {
            bail!("{} has no mask", dir.display());
        };
        if meta.num_classes as usize != num_classes {
            bail!(
                "{} has {} classes, the model {num_classes}",
                dir.display(),
                meta.num_classes
            );
        }
        let index = slide_index(dir, &mask, num_classes, stride)?;
        for (class, list) in merged.iter_mut().enumerate() {
            list.extend(index.candidates(class + 1).iter().map(|c| Candidate {
                slide: i as u32,
                ..*c
            }));
        }
        slides.push(Slide { image, mask });
    }
    Ok((slides, AnnotationIndex::from_candidates(merged)))
}

fn train<T: Scalar>(ctx: &Context, out: &Path, resume: bool) -> anyhow::Result<serde_json::Value> {
    let cfg = &ctx.config;
    let k = cfg.model.num_classes;
    let stride = cfg.data.candidate_stride;
    let (slides, index) = load_slides(&cfg.data.train, k, stride)?;
    let data = TrainingData {
        slides: &slides,
        index,
    };
    let validation_slides;
    let vdata = if cfg.data.validation.is_empty() {
        data.clone()
    } else {
        let (s, index) = load_slides(&cfg.data.validation, k, stride)?;
        validation_slides = s;
        TrainingData {
            slides: &validation_slides,
            index,
        }
    };
    let pairs = sample_pairs(
        &vdata,
        &cfg.model,
        cfg.data.validation_patches,
        cfg.data.validation_seed,
    )?;
    let mut validator = PatchValidator {
        pairs,
        batch_size: 4,
    };
    let plan = &cfg.train.plan;
    let mut model = HookNet::<T>::build(cfg.model.clone(), plan.seed)?;
    let options = FitOptions {
        run_dir: Some(out.to_path_buf()),
        resume,
    };
    let report = fit(&mut model, &data, &mut validator, plan, &options, |rec| {
        if let LogRecord::Epoch {
            epoch,
            mean_loss,
            val_macro_f1,
            is_best,
            ..
        } = rec
        {
            ctx.out.progress(&format!(
                "epoch {epoch}/{}: loss {mean_loss:.4}, validation macro F1 {val_macro_f1:.4}{}",
                plan.epochs,
                if *is_best { " (best)" } else { "" }
            ));
        }
    })?;
    Ok(json!({
        "run_dir": out,
        "best_epoch": report.best_epoch,
        "best_score": report.best_score,
        "best_checkpoint": out.join(BEST_CHECKPOINT),
        "log": out.join(LOG_FILE),
        "ledger": report.ledger.counts(),
    }))
}

pub fn run(mut ctx: Context, args: TrainArgs) -> anyhow::Result<()> {
    let c: &mut RunConfig = &mut ctx.config;
    if !args.train.is_empty() {
        c.data.train = args.train;
    }
    if !args.validation.is_empty() {
        c.data.validation = args.validation;
    }
    if let Some(e) = args.epochs {
        c.train.plan.epochs = e;
    }
    if let Some(s) = args.steps {
        c.train.plan.steps_per_epoch = s;
    }
    if args.out.is_some() {
        c.train.out = args.out;
    }
    c.train.resume |= args.resume;
    if c.data.train.is_empty() {
        bail!("no training data: set data.train or pass --train");
    }
    let Some(out) = c.train.out.clone() else {
        bail!("no run directory: set train.out or pass --out");
    };
    // Refuse to mix a fresh run into an existing one.
    if !c.train.resume && out.join(LOG_FILE).exists() {
        bail!(
            "{} already holds a run; pass --resume or choose another --out",
            out.display()
        );
    }
    ctx.config.echo_into(&out)?;
    let record = RunRecord {
        seed: ctx.config.train.plan.seed,
        precision: ctx.config.train.precision,
        tool_version: env!("CARGO_PKG_VERSION"),
        train: ctx.config.data.train.clone(),
        validation: ctx.config.data.validation.clone(),
    };
    fs::write(
        out.join("run.json"),
        serde_json::to_string_pretty(&record)? + "\n",
    )?;
    let resume = ctx.config.train.resume;
    let result = match ctx.config.train.precision {
        Precision::F32 => train::<f32>(&ctx, &out, resume)?,
        Precision::F64 => train::<f64>(&ctx, &out, resume)?,
    };
    ctx.out.emit(&result, || {
        format!(
            "best epoch {} (validation macro F1 {:.4}); checkpoint {}",
            result["best_epoch"],
            result["best_score"].as_f64().unwrap_or(f64::NAN),
            out.join(BEST_CHECKPOINT).display()
        )
    })
}
