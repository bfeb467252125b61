//! Front end of the `hetgpt` binary: synthesize graphs, pre-train
//! encoders, tune prompts, evaluate them and compare against
//! fine-tuning.

use std::ffi::OsString;
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};

use clap::{Args, Parser, Subcommand};

static QUIET: AtomicBool = AtomicBool::new(false);

/// `println!` unless `--quiet` was given.
macro_rules! say {
    ($($arg:tt)*) => {
        if !$crate::quiet() {
            println!($($arg)*);
        }
    };
}

pub(crate) fn quiet() -> bool {
    QUIET.load(Ordering::Relaxed)
}

pub mod commands;
pub mod config;

use config::Overrides;

/// Errors surfaced to the shell as exit codes.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Core(#[from] hetgpt_core::Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        use hetgpt_core::ErrorKind;
        match self {
            CliError::Config(_) => 2,
            CliError::Core(e) => match e.kind() {
                ErrorKind::Config => 2,
                ErrorKind::Checkpoint => 3,
                ErrorKind::Numeric => 4,
            },
        }
    }
}

#[derive(Parser)]
#[command(name = "hetgpt", version, about = "Prompt tuning for heterogeneous graphs")]
pub struct Cli {
    /// Suppress progress output on stdout.
    #[arg(long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Debug)]
struct Common {
    /// key=value config file; flags win over it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Base seed (falls back to HETGPT_SEED, then 0).
    #[arg(long)]
    seed: Option<u64>,
    /// Existing directory receiving outputs.
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args, Clone, Debug)]
struct Sweep {
    /// Labeled nodes per class: 1, 5, 20, 40 or 60.
    #[arg(long)]
    shots: Option<usize>,
    /// Number of seeds, counting up from the base seed.
    #[arg(long)]
    repeats: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic citation-style graph.
    Synth {
        #[command(flatten)]
        common: Common,
    },
    /// Contrastively pre-train an encoder and write its checkpoint.
    Pretrain {
        #[arg(long)]
        graph: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Tune prompts for each seed and append results rows.
    Tune {
        #[arg(long)]
        graph: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        sweep: Sweep,
        #[command(flatten)]
        common: Common,
    },
    /// Score a tuned prompt on one partition of its split.
    Eval {
        #[arg(long)]
        graph: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        prompt: PathBuf,
        /// Split shots; defaults to the one recorded in the prompt.
        #[arg(long)]
        shots: Option<usize>,
        #[arg(long, value_enum, default_value_t = commands::Partition::Test)]
        partition: commands::Partition,
        /// Write every target node's fused token to this file.
        #[arg(long)]
        dump_embeddings: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Prompt tuning against fine-tuning on identical splits.
    Compare {
        #[arg(long)]
        graph: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        sweep: Sweep,
        #[command(flatten)]
        common: Common,
    },
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    QUIET.store(cli.quiet, Ordering::Relaxed);
    match cli.command {
        Command::Synth { common } => {
            let cfg = commands::setup(
                &common.config,
                Overrides {
                    seed: common.seed,
                    ..Default::default()
                },
                &common.out_dir,
            )?;
            commands::synth(&cfg, &common.out_dir)
        }
        Command::Pretrain { graph, common } => {
            let cfg = commands::setup(
                &common.config,
                Overrides {
                    seed: common.seed,
                    ..Default::default()
                },
                &common.out_dir,
            )?;
            commands::pretrain(&cfg, &graph, &common.out_dir)
        }
        Command::Tune {
            graph,
            checkpoint,
            sweep,
            common,
        } => {
            let over = Overrides {
                seed: common.seed,
                shots: sweep.shots,
                repeats: sweep.repeats,
            };
            let cfg = commands::setup(&common.config, over, &common.out_dir)?;
            commands::tune(&cfg, &graph, &checkpoint, &common.out_dir)
        }
        Command::Eval {
            graph,
            checkpoint,
            prompt,
            shots,
            partition,
            dump_embeddings,
            common,
        } => {
            let split = Overrides {
                seed: common.seed,
                shots,
                repeats: None,
            };
            commands::setup(&common.config, split.clone(), &common.out_dir)?;
            let args = commands::EvalArgs {
                graph: &graph,
                checkpoint: &checkpoint,
                prompt: &prompt,
                partition,
                dump: dump_embeddings.as_deref(),
                split,
            };
            commands::eval(&args, &common.out_dir)
        }
        Command::Compare {
            graph,
            checkpoint,
            sweep,
            common,
        } => {
            let over = Overrides {
                seed: common.seed,
                shots: sweep.shots,
                repeats: sweep.repeats,
            };
            let cfg = commands::setup(&common.config, over, &common.out_dir)?;
            commands::compare(&cfg, &graph, &checkpoint, &common.out_dir)
        }
    }
}

/// Parses `args` (program name first) and runs the subcommand.
pub fn run_args<I, T>(args: I) -> Result<(), CliError>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = Cli::try_parse_from(args).map_err(|e| CliError::Config(e.to_string()))?;
    run(cli)
}

#[cfg(test)]
mod tests {
    use super::*;
    use hetgpt_core::Error;

    #[test]
    fn exit_codes_follow_error_kind() {
        assert_eq!(CliError::Config("x".into()).exit_code(), 2);
        assert_eq!(CliError::Core(Error::Split("x".into())).exit_code(), 2);
        assert_eq!(CliError::Core(Error::Checkpoint("x".into())).exit_code(), 3);
        assert_eq!(CliError::Core(Error::NonFinite { op: "exp" }).exit_code(), 4);
    }

    #[test]
    fn argument_errors_are_config_errors() {
        assert_eq!(run_args(["hetgpt", "frobnicate"]).unwrap_err().exit_code(), 2);
    }
}
