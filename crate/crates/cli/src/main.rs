//! `attrtune` command line: corpus generation, base training, one-shot tuning,
//! sampling, lambda sweeps, the dichotomy and ablation experiments, and
//! metric evaluation. Each command writes one run directory.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use attrtune::Error;
use clap::{Parser, Subcommand};

use crate::commands::Context;
use crate::config::RunConfig;

#[derive(Parser)]
#[command(name = "attrtune", version, about = "One-shot attribute tuning of a toy diffusion model")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// TOML run configuration; relative paths inside it resolve against its directory.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run directory (defaults to the command name).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Overrides the command's seed; seed lists become consecutive seeds from here.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Replace an existing, non-empty run directory.
    #[arg(long, global = true)]
    force: bool,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Generate the procedural corpus and its attribute classifier.
    Corpus,
    /// Train the base model on the corpus training split.
    BaseTrain,
    /// Tune one attribute from a single reference image.
    Tune,
    /// Sample from the base model, optionally with a tuned artifact.
    Sample,
    /// Sweep lambda for a tuned artifact and score each image.
    Sweep,
    /// Encoder-tuned vs decoder-tuned comparison.
    Dichotomy,
    /// Hypernetwork vs direct tuning comparison.
    Ablation,
    /// Score a directory of images against a reference.
    Eval,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::Corpus => "corpus",
            Command::BaseTrain => "base-train",
            Command::Tune => "tune",
            Command::Sample => "sample",
            Command::Sweep => "sweep",
            Command::Dichotomy => "dichotomy",
            Command::Ablation => "ablation",
            Command::Eval => "eval",
        }
    }
}

fn reseed(seeds: &mut [u64], start: u64) {
    for (i, s) in seeds.iter_mut().enumerate() {
        *s = start + i as u64;
    }
}

fn apply_seed(cfg: &mut RunConfig, command: Command, seed: u64) {
    match command {
        Command::Corpus => cfg.corpus.seed = seed,
        Command::BaseTrain => cfg.base_train.training.seed = seed,
        Command::Tune => cfg.tune.tuning.seed = seed,
        Command::Sample => cfg.sample.seed = seed,
        Command::Sweep => reseed(&mut cfg.sweep.seeds, seed),
        Command::Dichotomy => reseed(&mut cfg.dichotomy.seeds, seed),
        Command::Ablation => reseed(&mut cfg.ablation.seeds, seed),
        Command::Eval => {}
    }
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::FingerprintMismatch { .. } => 3,
        Error::Numeric(_) => 4,
        Error::Io { .. } | Error::Format { .. } => 1,
        _ => 2,
    }
}

fn run(cli: Cli) -> attrtune::Result<()> {
    let mut cfg = RunConfig::load(cli.config.as_deref())?;
    if let Some(seed) = cli.seed {
        apply_seed(&mut cfg, cli.command, seed);
    }
    let cwd = std::env::current_dir().map_err(|e| Error::io(".", e))?;
    let out = cwd.join(cli.out.unwrap_or_else(|| PathBuf::from(cli.command.name())));
    let ctx = Context { out, force: cli.force };
    match cli.command {
        Command::Corpus => commands::corpus(&ctx, &cfg),
        Command::BaseTrain => commands::base_train(&ctx, &cfg),
        Command::Tune => commands::tune(&ctx, &cfg),
        Command::Sample => commands::sample_cmd(&ctx, &cfg),
        Command::Sweep => commands::sweep(&ctx, &cfg),
        Command::Dichotomy => commands::dichotomy(&ctx, &cfg),
        Command::Ablation => commands::ablation(&ctx, &cfg),
        Command::Eval => commands::eval(&ctx, &cfg),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
