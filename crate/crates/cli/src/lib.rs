//! Batch driver for the ctrldiff engine.
//!
//! Every subcommand reads one [`config::RunConfig`] (JSON file plus
//! `--set key=value` overrides), writes into its own output directory and
//! finishes with a [`manifest::RunManifest`].

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod manifest;
pub mod model;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Parser, Subcommand};

use ctrldiff::{Error, Result};

use crate::commands::Context;
use crate::config::RunConfig;

pub const THREADS_VAR: &str = "DIFF_DESIGN_THREADS";

#[derive(Debug, Parser)]
#[command(name = "ctrldiff", version, about = "Controllable latent diffusion at desk scale")]
pub struct Cli {
    /// JSON run configuration; defaults apply to missing fields.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Override one configuration field, e.g. `--set train.steps=100`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a procedural layout corpus.
    GenData {
        #[arg(long, default_value = "data")]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        count: Option<usize>,
        #[arg(long)]
        split: Option<String>,
    },
    /// Train the prompt encoder and denoiser on a corpus.
    Train {
        #[arg(long, default_value = "data")]
        data: PathBuf,
        #[arg(long, default_value = "runs/train")]
        out: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
        /// Continue from a checkpoint that carries optimizer state.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Draw samples from a checkpoint.
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "runs/sample")]
        out: PathBuf,
        /// Omit for unconditional samples.
        #[arg(long)]
        prompt: Option<String>,
        /// PPM image for appearance control.
        #[arg(long)]
        reference: Option<PathBuf>,
        #[arg(long)]
        count: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Compare a candidate corpus or sample set against a reference corpus.
    Eval {
        #[arg(long)]
        reference: PathBuf,
        #[arg(long)]
        candidate: PathBuf,
        #[arg(long, default_value = "runs/eval")]
        out: PathBuf,
    },
    /// Check analytic gradients against central differences.
    Gradcheck {
        #[arg(long, default_value = "tiny")]
        preset: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Estimate the ELBO of corpus images under a checkpoint.
    Elbo {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "data")]
        data: PathBuf,
        #[arg(long, default_value = "runs/elbo")]
        out: PathBuf,
    },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::GenData { .. } => "gen-data",
            Command::Train { .. } => "train",
            Command::Sample { .. } => "sample",
            Command::Eval { .. } => "eval",
            Command::Gradcheck { .. } => "gradcheck",
            Command::Elbo { .. } => "elbo",
        }
    }

    /// Shorthand flags as config overrides, applied after `--set`.
    fn overrides(&self) -> Vec<String> {
        let mut v = Vec::new();
        let mut push = |key: &str, val: Option<String>| {
            if let Some(val) = val {
                v.push(format!("{key}={val}"));
            }
        };
        match self {
            Command::GenData { seed, count, split, .. } => {
                push("data.seed", seed.map(|s| s.to_string()));
                push("data.count", count.map(|s| s.to_string()));
                push("data.split", split.as_ref().map(|s| serde_json::Value::from(s.as_str()).to_string()));
            }
            Command::Train { steps, .. } => push("train.steps", steps.map(|s| s.to_string())),
            Command::Sample { count, seed, .. } => {
                push("sample.count", count.map(|s| s.to_string()));
                push("sample.seed", seed.map(|s| s.to_string()));
            }
            _ => {}
        }
        v
    }
}

fn threads() -> Result<usize> {
    match std::env::var(THREADS_VAR) {
        Ok(s) => match s.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => Err(Error::Config(format!("{THREADS_VAR} must be a positive integer, got {s:?}"))),
        },
        Err(_) => Ok(std::thread::available_parallelism().map_or(1, |n| n.get())),
    }
}

fn execute(cli: &Cli, args: Vec<String>) -> Result<i32> {
    let mut overrides = cli.overrides.clone();
    overrides.extend(cli.command.overrides());
    let (config, provenance) = RunConfig::load(cli.config.as_deref(), &overrides)?;
    let ctx = Context {
        config,
        provenance,
        args,
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads()?)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    pool.install(|| match &cli.command {
        Command::GenData { out, .. } => commands::gen_data(&ctx, out),
        Command::Train { data, out, resume, .. } => commands::train_cmd(&ctx, data, out, resume.as_deref()),
        Command::Sample {
            checkpoint,
            out,
            prompt,
            reference,
            ..
        } => commands::sample_cmd(&ctx, checkpoint, out, prompt.clone(), reference.as_deref()),
        Command::Eval {
            reference,
            candidate,
            out,
        } => commands::eval_cmd(&ctx, reference, candidate, out),
        Command::Gradcheck { preset, seed, out } => commands::gradcheck_cmd(&ctx, preset, *seed, out.as_deref()),
        Command::Elbo { checkpoint, data, out } => commands::elbo_cmd(&ctx, checkpoint, data, out),
    })
}

/// Parses `argv` (program name first) and runs the subcommand. Returns 0 on
/// success, 2 for invalid arguments or configuration, 3 for runtime failures.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let args = argv.iter().skip(1).map(|a| a.to_string_lossy().into_owned()).collect();
    match execute(&cli, args) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("ctrldiff {}: {e}", cli.command.name());
            if e.is_config() {
                2
            } else {
                3
            }
        }
    }
}
