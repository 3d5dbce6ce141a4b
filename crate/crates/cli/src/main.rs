//! Command-line surface for trajectory forecasting experiments:
//! data preparation, synthetic scene generation, training, evaluation,
//! and observation-horizon sweeps.

mod commands;
mod config;

use clap::{Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;
use trackcast::datahub::{Scenario, SourceFormat, SyntheticSpec};

#[derive(Parser)]
#[command(
    name = "trackcast",
    version,
    about = "Multi-vehicle trajectory forecasting: prepare data, train, evaluate, sweep"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

fn parse_format(s: &str) -> Result<SourceFormat, String> {
    match s {
        "ngsim" => Ok(SourceFormat::Ngsim),
        "chd" => Ok(SourceFormat::Chd),
        "canonical" => Ok(SourceFormat::Canonical),
        other => Err(format!("unknown format '{other}' (ngsim|chd|canonical)")),
    }
}

fn parse_scenario(s: &str) -> Result<Scenario, String> {
    s.parse().map_err(|e| format!("{e}"))
}

#[derive(Subcommand)]
enum Cmd {
    /// Ingest a trajectory table, down-sample, window into scenes, split.
    Prepare {
        /// Input trajectory file.
        #[arg(long)]
        input: PathBuf,
        /// Input format: ngsim, chd, or canonical.
        #[arg(long, value_parser = parse_format)]
        format: SourceFormat,
        /// Run config JSON supplying rates, horizons, stride, split, seed.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output dataset directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a synthetic multi-vehicle dataset.
    GenSynthetic {
        /// constant_velocity, constant_acceleration, lane_change, curve,
        /// or car_following.
        #[arg(long, value_parser = parse_scenario)]
        scenario: Scenario,
        #[arg(long, default_value_t = 10)]
        scenes: usize,
        #[arg(long, default_value_t = 3)]
        vehicles: usize,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        /// Output dataset directory.
        #[arg(long)]
        out: PathBuf,
        /// Sampling rate in Hz.
        #[arg(long, default_value_t = 5)]
        rate: u32,
        /// Gaussian position noise std (meters).
        #[arg(long, default_value_t = 0.0)]
        noise: f64,
        #[arg(long, default_value_t = 15)]
        t_oh: usize,
        #[arg(long, default_value_t = 25)]
        t_ph: usize,
        /// Train fraction of the scene split.
        #[arg(long, default_value_t = 0.8)]
        split: f64,
    },
    /// Train a model from a run config.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Evaluate a checkpoint on a prepared dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Prepared dataset directory.
        #[arg(long)]
        data: PathBuf,
        /// Report output directory (default: config/env resolution).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train and evaluate across observation horizons 15 / 10 / 5.
    Sweep {
        #[arg(long)]
        config: PathBuf,
    },
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.cmd {
        Cmd::Prepare {
            input,
            format,
            config,
            out,
        } => commands::cmd_prepare(&input, format, config.as_deref(), &out),
        Cmd::GenSynthetic {
            scenario,
            scenes,
            vehicles,
            seed,
            out,
            rate,
            noise,
            t_oh,
            t_ph,
            split,
        } => {
            let mut spec = SyntheticSpec::new(scenario, scenes, vehicles, seed);
            spec.rate_hz = rate;
            spec.noise_std = noise;
            spec.t_oh = t_oh;
            spec.t_ph = t_ph;
            commands::cmd_gen_synthetic(&spec, split, &out)
        }
        Cmd::Train { config } => commands::cmd_train(&config),
        Cmd::Eval {
            checkpoint,
            data,
            out,
        } => commands::cmd_eval(&checkpoint, &data, out.as_deref()),
        Cmd::Sweep { config } => commands::cmd_sweep(&config),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(commands::exit_code_for(&err))
        }
    }
}
