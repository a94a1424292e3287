//! `gfarena`: trace generation, training, evaluation and FLOP tables driven
//! by one JSON config.

mod commands;
mod config;
mod manifest;

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use log::error;

use crate::config::load_config;
use crate::manifest::RunManifest;

#[derive(Debug, Parser)]
#[command(name = "gfarena", version, about = "Grant-free uplink access experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write one evaluation trace per (delta_t, seed).
    GenTraces(Common),
    /// Train every (cluster, learned policy, seed) and write checkpoints and logs.
    Train(Common),
    /// Evaluate every configured policy on the generated traces.
    Eval(Common),
    /// Write the per-device FLOPs-per-second table.
    Flops(Common),
}

#[derive(Debug, Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    /// Override a config field, e.g. `--set train.episodes=20`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Output directory (overrides `out_dir`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Run a single seed (overrides `seeds`).
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads; defaults to GFARENA_WORKERS, then the CPU count.
    #[arg(long)]
    workers: Option<usize>,
}

fn default_workers() -> usize {
    std::env::var("GFARENA_WORKERS")
        .ok()
        .and_then(|v| v.parse().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

fn run(name: &str, args: Common) -> Result<bool> {
    let mut overrides = args.set;
    if let Some(out) = &args.out {
        overrides.push(format!(
            "out_dir={}",
            serde_json::Value::String(out.display().to_string())
        ));
    }
    if let Some(seed) = args.seed {
        overrides.push(format!("seeds=[{seed}]"));
    }
    let (cfg, resolved) = load_config(&args.config, &overrides)?;
    let workers = args.workers.filter(|&n| n > 0).unwrap_or_else(default_workers);

    std::fs::create_dir_all(&cfg.out_dir)?;
    let mut manifest = RunManifest {
        command: name.to_string(),
        config_path: args.config,
        resolved,
        seeds: cfg.seeds.clone(),
        out_dir: cfg.out_dir.clone(),
        artifacts: BTreeMap::new(),
        complete: false,
    };
    manifest.write()?;

    let ok = match name {
        "gen-traces" => commands::gen_traces(&cfg, &mut manifest, workers)?,
        "train" => commands::train(&cfg, &mut manifest, workers)?,
        "eval" => commands::eval(&cfg, &mut manifest, workers)?,
        _ => commands::flops(&cfg, &mut manifest)?,
    };
    manifest.complete = ok;
    manifest.write()?;
    Ok(ok)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let (name, args) = match cli.command {
        Command::GenTraces(a) => ("gen-traces", a),
        Command::Train(a) => ("train", a),
        Command::Eval(a) => ("eval", a),
        Command::Flops(a) => ("flops", a),
    };
    match run(name, args) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            error!("{name}: some cells failed");
            ExitCode::FAILURE
        }
        Err(e) => {
            error!("{name}: {e:#}");
            ExitCode::from(2)
        }
    }
}
