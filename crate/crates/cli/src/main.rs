//! `mms`: synthesize word images, preview masks, pre-train, evaluate, dump
//! attention maps and run the linear probe.

mod cmd;
mod io;
mod manifest;

use std::process::ExitCode;

use clap::{Parser, Subcommand};

/// Tool version plus the checkpoint format it reads and writes.
pub const VERSION: &str = concat!(env!("CARGO_PKG_VERSION"), " (checkpoint format MMS1 v1)");

#[derive(Parser)]
#[command(name = "mms", version = VERSION, about = "Multi-masking masked image modeling for word images")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic word-image dataset.
    Synth(cmd::synth::Args),
    /// Preview a random, block or span mask on an image.
    Mask(cmd::mask::Args),
    /// Pre-train the encoder/decoder on the masking branches.
    Pretrain(cmd::pretrain::Args),
    /// Score checkpoints on frozen masked evaluation sets.
    Eval(cmd::eval::Args),
    /// Dump final-layer attention maps.
    Attn(cmd::attn::Args),
    /// Train a linear probe on frozen column-pooled encoder features.
    Probe(cmd::probe::Args),
}

/// Bad flags, invalid configuration or missing inputs (exit code 2).
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct UsageError(pub String);

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<UsageError>().is_some() {
        return 2;
    }
    match err.downcast_ref::<mms_core::Error>() {
        Some(mms_core::Error::Config(_) | mms_core::Error::Range { .. } | mms_core::Error::Layout(_)) => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(a) => cmd::synth::run(a),
        Command::Mask(a) => cmd::mask::run(a),
        Command::Pretrain(a) => cmd::pretrain::run(a),
        Command::Eval(a) => cmd::eval::run(a),
        Command::Attn(a) => cmd::attn::run(a),
        Command::Probe(a) => cmd::probe::run(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let reason = format!("{e:#}").replace('\n', " ");
            eprintln!("error: {reason}");
            ExitCode::from(exit_code(&e))
        }
    }
}
