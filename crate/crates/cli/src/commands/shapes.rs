use std::fmt::Write as _;

use clap::Subcommand;
use hooknet_core::shape::{enumerate_valid_input_sizes, is_valid_input_size};
use hooknet_core::{
    solve_hook_depth, trace_shapes, BranchArchitecture, ResolutionPair, ShapeTrace,
};
use serde_json::json;

use crate::Context;

#[derive(Debug, Subcommand)]
pub enum ShapesCmd {
    /// Per-layer sizes for one input size.
    Trace {
        #[arg(long)]
        size: Option<usize>,
        #[arg(long)]
        depth: Option<usize>,
    },
    /// Whether an input size passes every stage.
    Valid {
        #[arg(long)]
        size: Option<usize>,
        #[arg(long)]
        depth: Option<usize>,
    },
    /// Valid input sizes in a range.
    Enumerate {
        #[arg(long)]
        min: Option<usize>,
        #[arg(long)]
        max: Option<usize>,
        #[arg(long)]
        depth: Option<usize>,
    },
    /// Context depth and crop for a resolution pair.
    Hook {
        #[arg(long)]
        rt: Option<f64>,
        #[arg(long)]
        rc: Option<f64>,
        #[arg(long)]
        depth: Option<usize>,
        #[arg(long)]
        size: Option<usize>,
    },
}

fn render_trace(t: &ShapeTrace) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "input {}", t.input_size);
    let _ = writeln!(
        s,
        "{:<12} {:>5} {:>6} {:>6} {:>6}",
        "stage", "depth", "in", "conv", "pool"
    );
    for e in &t.encoder_levels {
        let _ = writeln!(
            s,
            "{:<12} {:>5} {:>6} {:>6} {:>6}",
            "encoder", e.depth, e.pre_conv, e.post_conv, e.post_pool
        );
    }
    let _ = writeln!(
        s,
        "{:<12} {:>5} {:>6} {:>6} {:>6}",
        "bottleneck",
        t.depth(),
        t.bottleneck.pre_conv,
        t.bottleneck.post_conv,
        "-"
    );
    let _ = writeln!(
        s,
        "{:<12} {:>5} {:>6} {:>6} {:>6}",
        "stage", "depth", "up", "skip", "conv"
    );
    for d in &t.decoder_levels {
        let _ = writeln!(
            s,
            "{:<12} {:>5} {:>6} {:>6} {:>6}",
            "decoder", d.depth, d.post_upsample, d.skip_crop, d.post_conv
        );
    }
    let _ = writeln!(s, "output {}", t.output_size);
    s
}

pub fn run(ctx: &Context, cmd: ShapesCmd) -> anyhow::Result<()> {
    let cfg = &ctx.config.shapes;
    let arch = |depth: Option<usize>| BranchArchitecture::new(depth.unwrap_or(cfg.depth));
    match cmd {
        ShapesCmd::Trace { size, depth } => {
            let trace = trace_shapes(size.unwrap_or(cfg.input_size), &arch(depth)?)?;
            ctx.out.emit(&trace, || render_trace(&trace))
        }
        ShapesCmd::Valid { size, depth } => {
            let size = size.unwrap_or(cfg.input_size);
            let arch = arch(depth)?;
            let reason = trace_shapes(size, &arch).err().map(|e| e.to_string());
            let valid = is_valid_input_size(size, &arch);
            ctx.out.emit(
                &json!({"input_size": size, "depth": arch.depth, "valid": valid, "reason": reason}),
                || match &reason {
                    None => format!("{size} is valid for depth {}", arch.depth),
                    Some(r) => format!("{size} is invalid for depth {}: {r}", arch.depth),
                },
            )
        }
        ShapesCmd::Enumerate { min, max, depth } => {
            let (lo, hi) = (min.unwrap_or(cfg.min_size), max.unwrap_or(cfg.max_size));
            let arch = arch(depth)?;
            let sizes = enumerate_valid_input_sizes(lo, hi, &arch);
            let outputs: Vec<usize> = sizes
                .iter()
                .map(|&m| trace_shapes(m, &arch).map(|t| t.output_size))
                .collect::<Result<_, _>>()?;
            let record = json!({"min": lo, "max": hi, "depth": arch.depth, "input_sizes": sizes, "output_sizes": outputs});
            ctx.out.emit(&record, || {
                let mut s = format!(
                    "{} valid input sizes in [{lo}, {hi}] for depth {}\n",
                    sizes.len(),
                    arch.depth
                );
                for (m, o) in sizes.iter().zip(&outputs) {
                    let _ = writeln!(s, "{m:>6} -> {o}");
                }
                s
            })
        }
        ShapesCmd::Hook {
            rt,
            rc,
            depth,
            size,
        } => {
            let pair = ResolutionPair::new(
                rt.unwrap_or(cfg.target_resolution),
                rc.unwrap_or(cfg.context_resolution),
            )?;
            let size = size.unwrap_or(cfg.input_size);
            let plan = solve_hook_depth(&pair, &arch(depth)?, size)?;
            let record = json!({"resolutions": pair, "input_size": size, "hook": plan});
            ctx.out.emit(&record, || {
                format!(
                    "r_T={} r_C={} input {size}: d_T={} d_C={}, crop {}→{}, offset {}",
                    pair.target,
                    pair.context,
                    plan.target_depth,
                    plan.context_depth,
                    plan.context_map_size,
                    plan.target_map_size,
                    plan.crop_offset
                )
            })
        }
    }
}
