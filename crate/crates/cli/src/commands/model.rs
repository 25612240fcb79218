use std::fmt::Write as _;
use std::path::PathBuf;

use clap::Subcommand;
use hooknet_core::HookNet;

use super::infer::checkpoint_config;
use crate::Context;

#[derive(Debug, Subcommand)]
pub enum ModelCmd {
    /// Shape trace, hook plan and parameter counts.
    Summary {
        /// Read the model configuration from a checkpoint instead of the config.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

pub fn run(ctx: &Context, cmd: ModelCmd) -> anyhow::Result<()> {
    let ModelCmd::Summary { checkpoint } = cmd;
    let config = match &checkpoint {
        Some(path) => checkpoint_config(path)?,
        None => ctx.config.model.clone(),
    };
    let summary = HookNet::<f32>::build(config, 0)?.summary();
    ctx.out.emit(&summary, || {
        let c = &summary.config;
        let mut s = String::new();
        match c.context_resolution {
            Some(rc) => {
                let _ = writeln!(
                    s,
                    "HookNet r_T={} r_C={} lambda={}",
                    c.target_resolution, rc, c.lambda
                );
            }
            None => {
                let _ = writeln!(s, "U-Net r={}", c.target_resolution);
            }
        }
        let t = &summary.trace;
        let _ = writeln!(
            s,
            "input {} depth {}: encoder {:?}, bottleneck {}, output {}",
            t.input_size,
            t.depth(),
            t.encoder_post_conv_sizes(),
            t.bottleneck.post_conv,
            t.output_size
        );
        if let Some(h) = &summary.hook {
            let _ = writeln!(
                s,
                "hook: d_T={} d_C={}, crop {}→{}, offset {}",
                h.target_depth,
                h.context_depth,
                h.context_map_size,
                h.target_map_size,
                h.crop_offset
            );
        }
        let _ = writeln!(
            s,
            "parameters: {} (target {}, context {})",
            summary.parameter_count,
            summary.target_parameter_count,
            summary.context_parameter_count
        );
        for p in &summary.parameters {
            let _ = writeln!(s, "  {:<40} {:?}", p.name, p.shape);
        }
        s
    })
}
