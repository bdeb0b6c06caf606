//! `hark`: train, decode, verify, and inspect joint CTC-attention models.
//!
//! Every subcommand reads one flat key-value configuration (defaults, then
//! an optional `--config` file, then command-line overrides) and dumps the
//! resolved result next to its outputs. Exit codes: 0 on success, 1 when a
//! verification check fails, 2 on usage or configuration errors.

mod checks;
mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::config::RunConfig;

#[derive(Parser)]
#[command(
    name = "hark",
    version,
    about = "Joint CTC-attention sequence transcription toolkit"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model with the weighted two-head objective.
    Train(TrainArgs),
    /// Decode a manifest with a trained model and report the corpus CER.
    Decode(DecodeArgs),
    /// Run the built-in numerical verification suites.
    Check(CheckArgs),
    /// Generate the synthetic dataset.
    Synth(SynthArgs),
    /// Export teacher-forced alignment matrices as CSV files.
    AlignDump(AlignDumpArgs),
}

#[derive(Args)]
struct CommonArgs {
    /// Configuration file of `key = value` lines.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Override one configuration key (repeatable).
    #[arg(long, value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Random seed, overriding the `seed` key.
    #[arg(long, value_name = "N")]
    seed: Option<u64>,
    /// Output directory, overriding the `out_dir` key.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

impl CommonArgs {
    /// Defaults, then the config file, then `--set` pairs, then the
    /// dedicated flags.
    fn resolve(&self) -> anyhow::Result<RunConfig> {
        let mut cfg = RunConfig::default();
        if let Some(path) = &self.config {
            cfg.load_file(path)?;
        }
        for pair in &self.set {
            let (key, value) = pair
                .split_once('=')
                .ok_or_else(|| anyhow::anyhow!("--set expects KEY=VALUE, got {pair:?}"))?;
            cfg.set(key.trim(), value.trim())?;
        }
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(out) = &self.out {
            cfg.out_dir = out.display().to_string();
        }
        Ok(cfg)
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Dataset directory as written by `synth`; sets `train_manifest`,
    /// `valid_manifest`, and `vocab`.
    #[arg(long, value_name = "DIR")]
    data: Option<PathBuf>,
    /// CTC weight of the objective, overriding the `lambda` key.
    #[arg(long, value_name = "F")]
    lambda: Option<f64>,
    /// Training epochs, overriding the `epochs` key.
    #[arg(long, value_name = "N")]
    epochs: Option<usize>,
}

#[derive(Args)]
struct DecodeArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Trained model file, overriding the `params` key.
    #[arg(long, value_name = "PATH")]
    params: Option<PathBuf>,
    /// Manifest to decode, overriding the `decode_manifest` key.
    #[arg(long, value_name = "PATH")]
    manifest: Option<PathBuf>,
    /// Beam width, overriding the `beam_size` key.
    #[arg(long, value_name = "N")]
    beam_size: Option<usize>,
    /// Per-label score bonus, overriding the `length_penalty` key.
    #[arg(long, value_name = "F")]
    length_penalty: Option<f64>,
    /// Hypothesis source (attention or greedy-ctc), overriding `decoder`.
    #[arg(long, value_name = "KIND")]
    decoder: Option<String>,
}

#[derive(Args)]
struct CheckArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Run only the named suite (repeatable): ctc-oracle, ctc-identity,
    /// gradients, beam.
    #[arg(long, value_name = "NAME")]
    only: Vec<String>,
}

#[derive(Args)]
struct SynthArgs {
    #[command(flatten)]
    common: CommonArgs,
}

#[derive(Args)]
struct AlignDumpArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Trained model file, overriding the `params` key.
    #[arg(long, value_name = "PATH")]
    params: Option<PathBuf>,
    /// Manifest to align, overriding the `decode_manifest` key.
    #[arg(long, value_name = "PATH")]
    manifest: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<ExitCode> {
    match cli.command {
        Command::Train(args) => {
            let mut cfg = args.common.resolve()?;
            if let Some(dir) = &args.data {
                cfg.train_manifest = dir.join("train.tsv").display().to_string();
                cfg.valid_manifest = dir.join("valid.tsv").display().to_string();
                cfg.vocab = dir.join("vocab.txt").display().to_string();
            }
            if let Some(lambda) = args.lambda {
                cfg.lambda = lambda;
            }
            if let Some(epochs) = args.epochs {
                cfg.epochs = epochs;
            }
            commands::cmd_train(&cfg)?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Decode(args) => {
            let mut cfg = args.common.resolve()?;
            if let Some(params) = &args.params {
                cfg.params = params.display().to_string();
            }
            if let Some(manifest) = &args.manifest {
                cfg.decode_manifest = manifest.display().to_string();
            }
            if let Some(beam_size) = args.beam_size {
                cfg.beam_size = beam_size;
            }
            if let Some(penalty) = args.length_penalty {
                cfg.length_penalty = penalty;
            }
            if let Some(decoder) = &args.decoder {
                cfg.decoder = decoder.parse()?;
            }
            commands::cmd_decode(&cfg)?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Check(args) => {
            let cfg = args.common.resolve()?;
            let all_passed = checks::run_checks(cfg.seed, &args.only)?;
            if all_passed {
                Ok(ExitCode::SUCCESS)
            } else {
                Ok(ExitCode::from(1))
            }
        }
        Command::Synth(args) => {
            let cfg = args.common.resolve()?;
            commands::cmd_synth(&cfg)?;
            Ok(ExitCode::SUCCESS)
        }
        Command::AlignDump(args) => {
            let mut cfg = args.common.resolve()?;
            if let Some(params) = &args.params {
                cfg.params = params.display().to_string();
            }
            if let Some(manifest) = &args.manifest {
                cfg.decode_manifest = manifest.display().to_string();
            }
            commands::cmd_align_dump(&cfg)?;
            Ok(ExitCode::SUCCESS)
        }
    }
}
