use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context as _};
use clap::{Args, Subcommand};
use hooknet_core::pyramid::{load_meta, read_png};
use hooknet_core::{
    read_label_map, wilcoxon_signed_rank, ConfusionMatrix, LabelMask, Rect, TiledOutput,
};
use serde::Serialize;
use serde_json::json;

use crate::Context;

#[derive(Debug, Args)]
#[command(args_conflicts_with_subcommands = true)]
pub struct EvalArgs {
    #[command(subcommand)]
    cmd: Option<EvalCmd>,
    /// Label map written by `infer` (repeatable, paired with --ref).
    #[arg(long)]
    pred: Vec<PathBuf>,
    /// Reference pyramid directory with a mask (repeatable).
    #[arg(long = "ref")]
    reference: Vec<PathBuf>,
    /// Directory for metrics.json and metrics.csv.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also score pixels predicted from padded input.
    #[arg(long)]
    include_padded: bool,
}

#[derive(Debug, Subcommand)]
enum EvalCmd {
    /// Paired signed-rank test on per-slide scores.
    Wilcoxon {
        #[arg(long, value_delimiter = ',', required = true)]
        a: Vec<f64>,
        #[arg(long, value_delimiter = ',', required = true)]
        b: Vec<f64>,
    },
}

#[derive(Debug, Serialize)]
struct SlideScore {
    pred: PathBuf,
    reference: PathBuf,
    macro_f1: f64,
    per_class_f1: Vec<Option<f64>>,
}

/// Prediction and reference labels over `region` on the level-0 grid;
/// pixels to skip carry reference label 0.
fn level0_pairs(
    output: &TiledOutput,
    region: Rect,
    mask: &LabelMask,
    exclude_padded: bool,
) -> (Vec<u8>, Vec<u8>) {
    let pred = output.labels_on_level0(region);
    let s = output.scale as i64;
    let mut reference = Vec::with_capacity(pred.len());
    for j in 0..region.height as i64 {
        for i in 0..region.width as i64 {
            let (x, y) = (region.x + i, region.y + j);
            let (lx, ly) = (
                x.div_euclid(s) - output.origin.0,
                y.div_euclid(s) - output.origin.1,
            );
            let covered =
                lx >= 0 && ly >= 0 && (lx as usize) < output.width && (ly as usize) < output.height;
            let keep = covered
                && (!exclude_padded || output.valid[ly as usize * output.width + lx as usize]);
            reference.push(if keep { mask.get(x, y) } else { 0 });
        }
    }
    (pred, reference)
}

fn reference_mask(dir: &Path) -> anyhow::Result<(LabelMask, Vec<String>)> {
    let meta = load_meta(dir).with_context(|| format!("reading {}", dir.display()))?;
    let Some(file) = &meta.mask_file else {
        bail!("{} has no mask", dir.display());
    };
    let (w, h, data) = read_png(&dir.join(file), 1)?;
    Ok((
        LabelMask::new(w, h, meta.num_classes, data)?,
        meta.class_names,
    ))
}

fn score(ctx: &Context, args: EvalArgs) -> anyhow::Result<()> {
    if args.pred.is_empty() || args.pred.len() != args.reference.len() {
        bail!(
            "pass matching --pred and --ref lists ({} vs {})",
            args.pred.len(),
            args.reference.len()
        );
    }
    let exclude_padded = ctx.config.eval.exclude_padded && !args.include_padded;
    let mut pooled: Option<ConfusionMatrix> = None;
    let mut names = Vec::new();
    let mut slides = Vec::new();
    for (pred_path, ref_dir) in args.pred.iter().zip(&args.reference) {
        let (output, legend) = read_label_map(pred_path)
            .with_context(|| format!("reading {}", pred_path.display()))?;
        let (mask, class_names) = reference_mask(ref_dir)?;
        let (pred, reference) = level0_pairs(&output, legend.region, &mask, exclude_padded);
        let cm = ConfusionMatrix::from_maps(&pred, &reference, mask.num_classes as usize)?;
        let report = cm.report()?;
        slides.push(SlideScore {
            pred: pred_path.clone(),
            reference: ref_dir.clone(),
            macro_f1: report.macro_f1,
            per_class_f1: report.per_class_f1,
        });
        match &mut pooled {
            Some(p) if p.num_classes() == cm.num_classes() => p.merge(&cm),
            Some(_) => bail!("{} has a different class count", ref_dir.display()),
            None => {
                names = class_names;
                pooled = Some(cm);
            }
        }
    }
    let report = pooled.expect("at least one pair").report()?;
    if let Some(dir) = &args.out {
        fs::create_dir_all(dir)?;
        fs::write(
            dir.join("metrics.json"),
            serde_json::to_string_pretty(&json!({"pooled": report, "slides": slides}))? + "\n",
        )?;
        fs::write(dir.join("metrics.csv"), report.to_csv(&names))?;
        ctx.config.echo_into(dir)?;
    }
    let record = json!({"pooled": report, "slides": slides, "exclude_padded": exclude_padded});
    ctx.out.emit(&record, || {
        let mut s = format!(
            "macro F1 {:.4} over {} labeled pixels\n",
            report.macro_f1, report.labeled_pixels
        );
        for (i, f) in report.per_class_f1.iter().enumerate() {
            let name = names
                .get(i)
                .cloned()
                .unwrap_or_else(|| format!("class{}", i + 1));
            match f {
                Some(f) => s += &format!("  {name:<16} F1 {f:.4}\n"),
                None => s += &format!("  {name:<16} F1 undefined\n"),
            }
        }
        if slides.len() > 1 {
            for sl in &slides {
                s += &format!("  {} macro F1 {:.4}\n", sl.pred.display(), sl.macro_f1);
            }
        }
        s
    })
}

pub fn run(ctx: Context, args: EvalArgs) -> anyhow::Result<()> {
    match args.cmd {
        Some(EvalCmd::Wilcoxon { a, b }) => {
            let r = wilcoxon_signed_rank(&a, &b)?;
            ctx.out.emit(&r, || {
                format!(
                    "n={} W+={} W-={} p={:.6} ({:?})",
                    r.n, r.w_plus, r.w_minus, r.p_value, r.method
                )
            })
        }
        None => score(&ctx, args),
    }
}
