use std::path::{Path, PathBuf};

use anyhow::Context as _;
use clap::Args;
use hooknet_core::tensor::{checkpoint_dtype, read_checkpoint};
use hooknet_core::training::TrainState;
use hooknet_core::{
    load_pyramid, plan_tiles, run_tiled, write_label_map, DType, HookNet, HookNetConfig,
    PyramidImage, Rect, Scalar,
};
use serde_json::json;

use super::parse_region;
use crate::Context;

#[derive(Debug, Args)]
pub struct InferArgs {
    /// Pyramid directory.
    #[arg(long)]
    image: PathBuf,
    /// Checkpoint written by `train`.
    #[arg(long)]
    model: PathBuf,
    /// Level-0 region `x,y,w,h`; the whole image by default.
    #[arg(long, allow_hyphen_values = true)]
    region: Option<String>,
    /// Indexed label PNG; a validity PNG and a JSON legend are written beside it.
    #[arg(long)]
    out: PathBuf,
}

/// Model described by a checkpoint's training state, with its weights.
pub fn load_model<T: Scalar>(path: &Path) -> anyhow::Result<HookNet<T>> {
    let ckpt = read_checkpoint::<T>(path).with_context(|| format!("reading {}", path.display()))?;
    let state: TrainState = serde_json::from_str(&ckpt.metadata)
        .with_context(|| format!("{} carries no training state", path.display()))?;
    let mut model = HookNet::<T>::build(state.model, 0)?;
    ckpt.restore(&mut model.store)?;
    Ok(model)
}

/// Model configuration stored in a checkpoint.
pub fn checkpoint_config(path: &Path) -> anyhow::Result<HookNetConfig> {
    let state: TrainState = match checkpoint_dtype(path)? {
        DType::F32 => serde_json::from_str(&read_checkpoint::<f32>(path)?.metadata)?,
        DType::F64 => serde_json::from_str(&read_checkpoint::<f64>(path)?.metadata)?,
    };
    Ok(state.model)
}

fn infer<T: Scalar>(
    ctx: &Context,
    args: &InferArgs,
    image: &PyramidImage,
    region: Rect,
    class_names: &[String],
) -> anyhow::Result<serde_json::Value> {
    let model = load_model::<T>(&args.model)?;
    let cfg = model.config();
    let plan = plan_tiles(
        region,
        cfg.input_size,
        model.output_size(),
        cfg.target_resolution,
        image.base_resolution,
    )?;
    let workers = ctx.workers.unwrap_or(ctx.config.infer.workers);
    ctx.out.progress(&format!(
        "{} tiles of {}x{} on {workers} worker(s)",
        plan.tiles.len(),
        plan.cols,
        plan.rows
    ));
    let output = run_tiled(&model, image, &plan, workers)?;
    let files = write_label_map(
        &args.out,
        &output,
        region,
        cfg.target_resolution,
        class_names,
    )?;
    Ok(json!({
        "labels": files.labels,
        "validity": files.validity,
        "legend": files.legend,
        "region": region,
        "resolution_um": cfg.target_resolution,
        "width": output.width,
        "height": output.height,
        "tiles": plan.tiles.len(),
    }))
}

pub fn run(ctx: Context, args: InferArgs) -> anyhow::Result<()> {
    let (image, _, meta) =
        load_pyramid(&args.image).with_context(|| format!("loading {}", args.image.display()))?;
    let region = match (&args.region, ctx.config.infer.region) {
        (Some(s), _) => parse_region(s)?,
        (None, Some([x, y, w, h])) => Rect::new(x, y, w.max(0) as usize, h.max(0) as usize),
        (None, None) => Rect::new(0, 0, image.width(), image.height()),
    };
    if let Some(parent) = args.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    let result = match checkpoint_dtype(&args.model)? {
        DType::F32 => infer::<f32>(&ctx, &args, &image, region, &meta.class_names)?,
        DType::F64 => infer::<f64>(&ctx, &args, &image, region, &meta.class_names)?,
    };
    let stem = args
        .out
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("labels");
    std::fs::write(
        args.out.with_file_name(format!("{stem}.config.json")),
        ctx.config.to_json() + "\n",
    )?;
    ctx.out.emit(&result, || {
        format!(
            "wrote {} ({}x{} at {} μm/px from {} tiles)",
            args.out.display(),
            result["width"],
            result["height"],
            result["resolution_um"],
            result["tiles"]
        )
    })
}
