//! Command implementations behind the `ganbank` binary. Each command is a
//! plain function so tests can drive it without spawning a process.

pub mod ablate;
pub mod artifacts;
pub mod config;
pub mod invert;
pub mod landscape;
pub mod relight;
pub mod synth;
pub mod train;

use std::path::PathBuf;

use clap::{Parser, Subcommand};
use ganbank::Result;

#[derive(Debug, Parser)]
#[command(name = "ganbank", version, about = "Intrinsic decomposition by joint inversion of per-component GANs")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a procedural dataset with ground-truth components.
    Synth(synth::SynthArgs),
    /// Train a component GAN (or the joint albedo+shading GAN).
    Train(train::TrainArgs),
    /// Train latent encoders for a set of generators.
    TrainEncoder(train::TrainEncoderArgs),
    /// Decompose one image by inverting the generators jointly.
    Invert(invert::InvertArgs),
    /// Run the variant grid over a dataset's test split.
    Ablate(ablate::AblateArgs),
    /// Evaluate a latent loss over a 2-D sample bank.
    Landscape(landscape::LandscapeArgs),
    /// Move the shading code along an edit direction.
    Relight(relight::RelightArgs),
}

/// Runs one command and returns the path of its main artifact.
pub fn run(cli: Cli) -> Result<PathBuf> {
    match cli.command {
        Command::Synth(a) => synth::run(&a),
        Command::Train(a) => train::run(&a),
        Command::TrainEncoder(a) => train::run_encoder(&a),
        Command::Invert(a) => invert::run(&a),
        Command::Ablate(a) => ablate::run(&a),
        Command::Landscape(a) => landscape::run(&a),
        Command::Relight(a) => relight::run(&a),
    }
}

/// Parses `args` (including the program name) and runs the command.
pub fn run_from<I, T>(args: I) -> Result<PathBuf>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = Cli::try_parse_from(args).map_err(|e| ganbank::Error::InvalidArgument(e.to_string()))?;
    run(cli)
}
