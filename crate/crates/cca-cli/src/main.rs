//! Command-line front end for the conditional cross-attention embedder.
//!
//! Exit codes: 0 success, 1 usage/configuration error, 2 runtime/numeric
//! error. Logging level comes from `CCA_LOG` (error, info, debug).

mod commands;
mod run_config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use cca_core::{EmbedType, Error, Precision};
use run_config::{Overrides, RunConfig};

#[derive(Parser)]
#[command(
    name = "cca",
    about = "Attribute-specific image embedding with a single conditional cross-attention backbone",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct CommonArgs {
    /// TOML run configuration; flags override file values
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed for all randomness
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for data generation and evaluation
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Conditional head variant: type1, type2, mask-baseline, unconditioned
    #[arg(long, value_parser = parse_embed_type, global = true)]
    embed_type: Option<EmbedType>,
}

fn parse_embed_type(s: &str) -> Result<EmbedType, String> {
    EmbedType::parse(s).map_err(|e| e.to_string())
}

fn parse_precision(s: &str) -> Result<Precision, String> {
    match s {
        "f32" => Ok(Precision::F32),
        "f64" => Ok(Precision::F64),
        other => Err(format!("unknown precision {other:?} (expected f32 or f64)")),
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic multi-attribute dataset
    GenData {
        #[command(flatten)]
        common: CommonArgs,
        /// Output dataset directory
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model on a dataset
    Train {
        #[command(flatten)]
        common: CommonArgs,
        /// Dataset directory (from gen-data)
        #[arg(long)]
        data: PathBuf,
        /// Output directory for checkpoints and logs
        #[arg(long)]
        out: PathBuf,
        /// Continue from a training-state file (state.cca)
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Override the epoch budget
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Evaluate a checkpoint: retrieval mAP per attribute + triplet accuracy
    Eval {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        data: PathBuf,
        /// Model checkpoint (model.cca)
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Export embeddings and attention rows for all items and conditions
    Embed {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Verify model gradients against central finite differences
    Gradcheck {
        #[command(flatten)]
        common: CommonArgs,
        /// Storage precision under test: f64 (default) or f32
        #[arg(long, value_parser = parse_precision)]
        precision: Option<Precision>,
    },
}

fn overrides_of(common: &CommonArgs) -> Overrides {
    Overrides {
        seed: common.seed,
        threads: common.threads,
        embed_type: common.embed_type,
        epochs: None,
        precision: None,
    }
}

fn run(cli: Cli) -> cca_core::Result<()> {
    match cli.command {
        Command::GenData { common, out } => {
            let cfg = RunConfig::load(common.config.as_deref(), &overrides_of(&common))?;
            commands::cmd_gen_data(&cfg, &out)
        }
        Command::Train {
            common,
            data,
            out,
            resume,
            epochs,
        } => {
            let mut ov = overrides_of(&common);
            ov.epochs = epochs;
            let cfg = RunConfig::load(common.config.as_deref(), &ov)?;
            commands::cmd_train(&cfg, &data, &out, resume.as_deref())
        }
        Command::Eval {
            common,
            data,
            checkpoint,
            out,
        } => {
            let cfg = RunConfig::load(common.config.as_deref(), &overrides_of(&common))?;
            commands::cmd_eval(&cfg, &data, &checkpoint, &out)
        }
        Command::Embed {
            common,
            data,
            checkpoint,
            out,
        } => {
            let cfg = RunConfig::load(common.config.as_deref(), &overrides_of(&common))?;
            commands::cmd_embed(&cfg, &data, &checkpoint, &out)
        }
        Command::Gradcheck { common, precision } => {
            let mut ov = overrides_of(&common);
            ov.precision = precision;
            let mut cfg = RunConfig::load(common.config.as_deref(), &ov)?;
            if common.config.is_none() {
                // default to the small verification architecture
                let embed_type = cfg.encoder.embed_type;
                let p = cfg.encoder.precision;
                cfg.encoder = cca_core::EncoderConfig::tiny(embed_type);
                cfg.encoder.precision = p;
            }
            commands::cmd_gradcheck(&cfg)
        }
    }
}

/// Usage and configuration problems exit 1; runtime and numeric failures
/// exit 2.
fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::Config(_)
        | Error::Condition { .. }
        | Error::Dataset(_)
        | Error::ManifestParse(_)
        | Error::Sampling(_)
        | Error::Checkpoint(_) => 1,
        _ => 2,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("CCA_LOG", "info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // clap's own help/version output is a success path
            if e.use_stderr() {
                eprint!("{e}");
                return ExitCode::from(1);
            }
            print!("{e}");
            return ExitCode::SUCCESS;
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}
