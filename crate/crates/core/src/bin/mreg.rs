use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use mreg::cli;
use mreg::synthgen::Split;

#[derive(Parser)]
#[command(name = "mreg", version, about = "Synthetic MR grading: generate, train, evaluate")]
struct Args {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// JSON run config.
    #[arg(long)]
    config: PathBuf,
    /// Ablation override, e.g. `use_amp=false`. Repeatable.
    #[arg(long = "ablation", value_name = "KEY=VALUE")]
    ablations: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic dataset and manifest.
    Gen {
        #[command(flatten)]
        common: Common,
    },
    /// Train and write checkpoints and history.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Print and save the metrics report of one split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "test")]
        split: Split,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Grade one video from the dataset manifest.
    Predict {
        #[command(flatten)]
        common: Common,
        /// Manifest id or frame directory.
        #[arg(long)]
        video: String,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Export per-frame scores of one split as CSV.
    Scores {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "test")]
        split: Split,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn run(args: Args) -> mreg::Result<()> {
    let mut out = std::io::stdout().lock();
    let load = |c: &Common| cli::load_config(&c.config, &c.ablations);
    match args.command {
        Command::Gen { common } => cli::cmd_gen(&load(&common)?, &mut out).map(drop),
        Command::Train { common } => cli::cmd_train(&load(&common)?, &mut out).map(drop),
        Command::Eval {
            common,
            split,
            checkpoint,
            out: path,
        } => cli::cmd_eval(&load(&common)?, checkpoint.as_deref(), split, path.as_deref(), &mut out).map(drop),
        Command::Predict {
            common,
            video,
            checkpoint,
        } => cli::cmd_predict(&load(&common)?, checkpoint.as_deref(), &video, &mut out).map(drop),
        Command::Scores {
            common,
            split,
            checkpoint,
            out: path,
        } => cli::cmd_scores(&load(&common)?, checkpoint.as_deref(), split, path.as_deref(), &mut out).map(drop),
    }
}

fn main() -> ExitCode {
    match run(Args::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("mreg: {e}");
            ExitCode::from(cli::exit_code(&e) as u8)
        }
    }
}
