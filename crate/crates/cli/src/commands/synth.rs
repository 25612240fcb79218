use std::path::PathBuf;

use clap::Subcommand;
use hooknet_core::synth::{class_names, NUM_CLASSES};
use hooknet_core::{generate_world, save_pyramid, sparsify_mask};
use serde_json::json;

use crate::Context;

#[derive(Debug, Subcommand)]
pub enum SynthCmd {
    /// Render a world into a pyramid directory.
    Generate {
        #[arg(long)]
        out: PathBuf,
        /// Share of annotated blocks kept in the mask.
        #[arg(long)]
        keep_fraction: Option<f64>,
    },
}

pub fn run(mut ctx: Context, cmd: SynthCmd) -> anyhow::Result<()> {
    let SynthCmd::Generate { out, keep_fraction } = cmd;
    if let Some(k) = keep_fraction {
        ctx.config.synth.keep_fraction = k;
    }
    let cfg = &ctx.config.synth;
    let (img, mask) = generate_world(&cfg.world)?;
    let mask = sparsify_mask(&mask, cfg.keep_fraction, cfg.world.seed)?;
    let meta = save_pyramid(&out, &img, Some(&mask), NUM_CLASSES as u8, &class_names())?;
    ctx.config.echo_into(&out)?;
    let histogram = mask.class_histogram();
    let record = json!({"out": out, "meta": meta, "class_histogram": histogram});
    ctx.out.emit(&record, || {
        format!(
            "wrote {} (seed {}, {}x{}, {} levels); labeled pixels per class {:?}",
            out.display(),
            cfg.world.seed,
            meta.width,
            meta.height,
            meta.levels.len(),
            &histogram[1..]
        )
    })
}
