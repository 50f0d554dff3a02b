// SPDX-License-Identifier: Apache-2.0

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop, clippy::too_many_arguments)]

mod commands;
mod config;
mod plot;

use std::path::PathBuf;
use std::process::ExitCode;

use cart_core::encoder::Modality;
use cart_core::sim::TerrainKind;
use cart_core::CoreError;
use clap::{Parser, Subcommand};

use crate::commands::InferArgs;
use crate::config::{out_dir, RunConfig};

#[derive(Parser)]
#[command(
    name = "cart",
    version,
    about = "Terrain-adaptive quadruped command policy with test-time segment selection"
)]
struct Cli {
    /// TOML run configuration; omitted sections take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (for `plot`, the output file).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Roll out randomized commands on every terrain and log a dataset.
    Collect,
    /// Train a policy on a logged dataset.
    Train {
        dataset: PathBuf,
        #[arg(long, default_value = "full")]
        modality: Modality,
    },
    /// Build the segment library from two checkpoints and train the scoring head.
    BuildLibrary {
        #[arg(long)]
        full: PathBuf,
        #[arg(long)]
        proprio: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
    },
    /// Run one closed-loop rollout and write its trace.
    Infer {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        library: Option<PathBuf>,
        /// Use the checkpoint unchanged.
        #[arg(long)]
        no_tss: bool,
        /// Fixed `SPEED,HEIGHT` command instead of a policy.
        #[arg(long, value_parser = parse_pair, conflicts_with_all = ["checkpoint", "library"])]
        fixed: Option<(f64, f64)>,
        #[arg(long)]
        terrain: Option<TerrainKind>,
        #[arg(long)]
        difficulty: Option<f64>,
        /// Goal position `X,Y` in metres.
        #[arg(long, value_parser = parse_pair)]
        goal: Option<(f64, f64)>,
        #[arg(long)]
        perturbation: Option<f64>,
        #[arg(long, default_value = "cart")]
        label: String,
    },
    /// Time segment selection over a synthetic library.
    BenchTss {
        #[arg(long)]
        segments: Option<usize>,
        #[arg(long)]
        trials: Option<usize>,
    },
    /// Sweep slip displacement against speed on flat ground.
    SweepDeltaq,
    /// Aggregate traces by label into performance and stability tables.
    Eval { traces: PathBuf },
    /// Render a sweep CSV or a trace JSON as SVG.
    Plot { input: PathBuf },
}

fn parse_pair(s: &str) -> Result<(f64, f64), String> {
    let (a, b) = s
        .split_once(',')
        .ok_or_else(|| format!("expected two comma-separated numbers, got `{s}`"))?;
    let p = |v: &str| v.trim().parse::<f64>().map_err(|e| format!("`{v}`: {e}"));
    Ok((p(a)?, p(b)?))
}

fn exit_code(e: &CoreError) -> u8 {
    match e {
        CoreError::Config(_) => 2,
        CoreError::Data { .. } | CoreError::Io { .. } => 3,
        _ => 4,
    }
}

fn run(cli: Cli) -> cart_core::Result<()> {
    let mut cfg = RunConfig::load(cli.config.as_deref())?;
    if let Command::Infer {
        terrain,
        difficulty,
        goal,
        perturbation,
        ..
    } = &cli.command
    {
        if let Some(k) = terrain {
            cfg.terrain.kind = *k;
        }
        if let Some(d) = difficulty {
            cfg.terrain.difficulty = *d;
        }
        if let Some((x, y)) = goal {
            cfg.rollout.goal = [*x, *y];
        }
        if let Some(p) = perturbation {
            cfg.perturbation = *p;
        }
    }
    let cfg = cfg.resolve(cli.seed)?;
    let out = &cli.out;
    match &cli.command {
        Command::Collect => commands::collect(&cfg, &out_dir(out, "dataset")),
        Command::Train { dataset, modality } => commands::train(&cfg, dataset, *modality, &out_dir(out, "checkpoints")),
        Command::BuildLibrary { full, proprio, dataset } => commands::build_library(&cfg, full, proprio, dataset, &out_dir(out, "library")),
        Command::Infer {
            checkpoint,
            library,
            no_tss,
            fixed,
            label,
            ..
        } => commands::infer(
            &cfg,
            &InferArgs {
                checkpoint: checkpoint.as_deref(),
                library: library.as_deref(),
                no_tss: *no_tss,
                fixed: *fixed,
                label,
                out: &out_dir(out, "traces"),
            },
        ),
        Command::BenchTss { segments, trials } => commands::bench_tss(&cfg, *segments, *trials, &out_dir(out, "bench")),
        Command::SweepDeltaq => commands::sweep(&cfg, &out_dir(out, "sweep")),
        Command::Eval { traces } => commands::eval(&cfg, traces, &out_dir(out, "eval")),
        Command::Plot { input } => commands::plot(input, out.as_deref()),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
