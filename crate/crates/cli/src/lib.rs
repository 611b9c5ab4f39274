//! The `vidflow` command line: toy training, sampling, streaming, VAE
//! checks, parallel-layout planning and cache benchmarks.
//!
//! Exit codes: 0 success, 1 target not met, 2 no feasible plan, 3 bad input
//! (I/O, file format or configuration), 4 divergence.

pub mod commands;
pub mod config;
pub mod error;
pub mod models;
pub mod ppm;
pub mod text;

use clap::{Parser, Subcommand};
use config::RunConfig;
use error::{CliError, Exit};
use std::io::Write;
use std::path::PathBuf;

#[derive(Debug, Parser)]
#[command(name = "vidflow", version, about = "Toy video latent diffusion engine")]
pub struct Cli {
    /// key=value configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides `seed` from the configuration.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory (default `out`).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Extra `key=value` override, applied after the file; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub sets: Vec<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Full-pass versus streamed VAE equivalence over fixture clips.
    VaeCheck,
    /// Train the toy DiT on a synthetic latent distribution.
    TrainToy,
    /// Sample latents (and optionally frames) from a DiT checkpoint.
    Generate,
    /// Run the sliding-window denoise queue.
    Stream,
    /// Rank parallel layouts for a training scenario.
    Plan,
    /// Error and op savings of cached sampling schedules.
    CacheBench,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::VaeCheck => "vae-check",
            Command::TrainToy => "train-toy",
            Command::Generate => "generate",
            Command::Stream => "stream",
            Command::Plan => "plan",
            Command::CacheBench => "cache-bench",
        }
    }
}

/// Runs one invocation, writing reports to `out` and diagnostics to `err`.
pub fn run<I, S>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            if e.use_stderr() {
                let _ = write!(err, "{e}");
                return Exit::Input.code();
            }
            let _ = write!(out, "{e}");
            return Exit::Ok.code();
        }
    };
    match dispatch(&cli, out) {
        Ok(code) => code.code(),
        Err(e) => {
            let _ = writeln!(err, "error: {}: {e}", cli.command.name());
            e.exit.code()
        }
    }
}

pub fn dispatch(cli: &Cli, out: &mut dyn Write) -> Result<Exit, CliError> {
    let cfg = RunConfig::load(cli.config.as_deref(), &cli.sets, cli.seed, cli.out.as_deref())?;
    match cli.command {
        Command::VaeCheck => commands::vae_check::run(&cfg, out),
        Command::TrainToy => commands::train::run(&cfg, out),
        Command::Generate => commands::generate::run(&cfg, out),
        Command::Stream => commands::stream::run(&cfg, out),
        Command::Plan => commands::plan::run(&cfg, out),
        Command::CacheBench => commands::bench::run(&cfg, out),
    }
}
