//! `spikenav` — dead-reckoning pipeline driver.
//!
//! Subcommands cover the whole experiment loop: `synth` and `corrupt`
//! produce datasets, `split` assigns sequences to train/val/test, `train`
//! fits the adaptive correction network, `run` filters a sequence (static
//! or adaptive noise), and `eval` scores the result.
//!
//! Exit codes: 0 success, 2 invalid input or config, 3 I/O failure,
//! 4 numerical failure (non-finite value).

mod commands;
mod config;

use clap::{Parser, Subcommand};
use spikenav_core::CoreError;

#[derive(Parser)]
#[command(
    name = "spikenav",
    version,
    about = "IMU dead-reckoning with a spiking-network-adapted invariant EKF"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a clean synthetic IMU sequence with exact ground truth.
    Synth(commands::SynthArgs),
    /// Add sequence biases and white noise to a clean IMU stream.
    Corrupt(commands::CorruptArgs),
    /// Assign sequence names to train/val/test and write a manifest.
    Split(commands::SplitArgs),
    /// Train the adaptive correction network through the filter.
    Train(commands::TrainArgs),
    /// Filter an IMU stream into a trajectory estimate.
    Run(commands::RunArgs),
    /// Score an estimated trajectory against ground truth.
    Eval(commands::EvalArgs),
}

fn exit_code(e: &CoreError) -> i32 {
    match e {
        CoreError::Io(_) => 3,
        CoreError::NonFinite(_) | CoreError::NonFiniteLoss { .. } => 4,
        _ => 2,
    }
}

fn main() {
    let cli = Cli::parse();
    let result = match &cli.cmd {
        Cmd::Synth(a) => commands::cmd_synth(a),
        Cmd::Corrupt(a) => commands::cmd_corrupt(a),
        Cmd::Split(a) => commands::cmd_split(a),
        Cmd::Train(a) => commands::cmd_train(a),
        Cmd::Run(a) => commands::cmd_run(a),
        Cmd::Eval(a) => commands::cmd_eval(a),
    };
    if let Err(e) = result {
        eprintln!("error: {e}");
        std::process::exit(exit_code(&e));
    }
}
