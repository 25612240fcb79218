//! `hooknet`: command-line front end for the segmentation engine.
//!
//! Exit codes: 0 success, 1 a pipeline failed, 2 invalid flags or
//! configuration. Failures print one JSON error record on stderr.

mod commands;
mod config;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::commands::{eval, infer, model, pyramid, shapes, synth, train};
use crate::config::{ConfigError, Precision, RunConfig};
use crate::output::Output;

pub const EXIT_FAILURE: u8 = 1;
pub const EXIT_USAGE: u8 = 2;

#[derive(Debug, Parser)]
#[command(
    name = "hooknet",
    version,
    about = "Multi-resolution segmentation with HookNet"
)]
struct Cli {
    /// Machine-readable JSON on stdout.
    #[arg(long, global = true)]
    json: bool,
    /// JSON run configuration; flags override its keys.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Seed for every random choice of the command.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads.
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[arg(long, global = true, value_enum)]
    precision: Option<Precision>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Input-size and hook-depth arithmetic.
    #[command(subcommand)]
    Shapes(shapes::ShapesCmd),
    /// Build, inspect and sample image pyramids.
    #[command(subcommand)]
    Pyramid(pyramid::PyramidCmd),
    /// Synthetic benchmark worlds.
    #[command(subcommand)]
    Synth(synth::SynthCmd),
    /// Train a model.
    Train(train::TrainArgs),
    /// Tiled whole-region inference.
    Infer(infer::InferArgs),
    /// Score label maps against reference masks.
    Eval(eval::EvalArgs),
    /// Inspect a model.
    #[command(subcommand)]
    Model(model::ModelCmd),
}

/// Flags shared by every command, resolved against the configuration.
pub struct Context {
    pub config: RunConfig,
    pub out: Output,
    pub workers: Option<usize>,
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let mut config = RunConfig::load_or_default(cli.config.as_deref())?;
    if let Some(seed) = cli.seed {
        config.train.plan.seed = seed;
        config.synth.world.seed = seed;
    }
    if let Some(p) = cli.precision {
        config.train.precision = p;
    }
    if let Some(w) = cli.workers {
        config.infer.workers = w;
    }
    let ctx = Context {
        config,
        out: Output { json: cli.json },
        workers: cli.workers,
    };
    match cli.command {
        Command::Shapes(cmd) => shapes::run(&ctx, cmd),
        Command::Pyramid(cmd) => pyramid::run(&ctx, cmd),
        Command::Synth(cmd) => synth::run(ctx, cmd),
        Command::Train(args) => train::run(ctx, args),
        Command::Infer(args) => infer::run(ctx, args),
        Command::Eval(args) => eval::run(ctx, args),
        Command::Model(cmd) => model::run(&ctx, cmd),
    }
}

fn error_record(err: &anyhow::Error) -> (u8, serde_json::Value) {
    let chain: Vec<String> = err.chain().map(|e| e.to_string()).collect();
    match err.downcast_ref::<ConfigError>() {
        Some(c) => (
            EXIT_USAGE,
            serde_json::json!({"error": {"kind": "config", "key": c.key, "message": c.message, "chain": chain}}),
        ),
        None => (
            EXIT_FAILURE,
            serde_json::json!({"error": {"kind": "runtime", "message": err.to_string(), "chain": chain}}),
        ),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let _ = e.print();
            let record =
                serde_json::json!({"error": {"kind": "usage", "message": e.kind().to_string()}});
            eprintln!("{record}");
            return ExitCode::from(EXIT_USAGE);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let (code, record) = error_record(&err);
            eprintln!("{record}");
            ExitCode::from(code)
        }
    }
}
