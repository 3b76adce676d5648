//! `emanet`: train, evaluate, verify and cost EMA-Net models on synthetic scenes.
//!
//! Exit codes: 0 success, 1 failed verification or runtime error, 2 usage or
//! configuration error.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::{parse_scale, ConfigError, RunConfig};

#[derive(Parser, Debug)]
#[command(
    name = "emanet",
    version,
    about = "EMA-Net multitask dense prediction on synthetic scenes"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// `key = value` run configuration.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Overrides the `seed` key.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Distillation scale denominator: 4, 6 or 8.
    #[arg(long, global = true, value_parser = parse_scale)]
    scale: Option<usize>,
    /// Overrides the `out_dir` key.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Overrides any config key; repeatable. Applied before the dedicated flags.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train on generated scenes; writes a checkpoint and a per-epoch log.
    Train,
    /// Evaluate a checkpoint on held-out scenes; writes a metric record.
    Eval,
    /// Finite-difference gradient checks of every differentiable operation.
    Gradcheck,
    /// Grouped-versus-dense fusion and interleave round-trip checks.
    Oracle {
        /// Randomised fusion configurations to compare.
        #[arg(long, default_value_t = 50)]
        configs: usize,
    },
    /// Parameter and FLOP report of the configured model.
    Cost,
    /// Multitask gain of one metric record over a baseline record.
    MtlGain { model: PathBuf, baseline: PathBuf },
    /// Write the training scenes to disk.
    GenData,
}

fn resolve(cli: &Cli) -> Result<RunConfig, ConfigError> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    for assignment in &cli.set {
        cfg.apply_override(assignment)?;
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(scale) = cli.scale {
        cfg.scale = scale;
    }
    if let Some(out) = &cli.out {
        cfg.out_dir = out.clone();
    }
    Ok(cfg)
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<ConfigError>().is_some() {
        return 2;
    }
    match err.downcast_ref::<emanet::Error>() {
        Some(emanet::Error::Config(_) | emanet::Error::Format { .. }) => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = resolve(&cli)
        .map_err(anyhow::Error::from)
        .and_then(|cfg| match &cli.command {
            Command::Train => commands::train(&cfg),
            Command::Eval => commands::eval(&cfg),
            Command::Gradcheck => commands::gradcheck(&cfg),
            Command::Oracle { configs } => commands::oracle(&cfg, *configs),
            Command::Cost => commands::cost(&cfg),
            Command::MtlGain { model, baseline } => commands::mtl_gain(model, baseline),
            Command::GenData => commands::gen_data(&cfg),
        });
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
