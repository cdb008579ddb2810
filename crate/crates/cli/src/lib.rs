//! `omnicli`: dataset generation, training, evaluation, gradient checks and
//! the inference service behind one binary.

pub mod commands;
pub mod segment;
pub mod server;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "omnicli", version, about = "Omni-prompt referring segmentation toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    Desk,
    PaperFaithful,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate and validate a synthetic dataset.
    BuildData {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// JSON dataset config; `--seed` still applies.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Run the three training stages.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// key=value training config applied on top of the preset.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Preset::Desk)]
        preset: Preset,
        /// Start from this checkpoint instead of a fresh initialization.
        #[arg(long)]
        ckpt: Option<PathBuf>,
    },
    /// Score a checkpoint on one split.
    Eval {
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint path, or a stage name (`vl_align`, `stage3`, ...) inside `--run`.
        #[arg(long)]
        ckpt: String,
        #[arg(long, default_value = "run")]
        run: PathBuf,
        #[arg(long)]
        split: String,
        /// Re-prompt every visual reference with this prompt kind.
        #[arg(long)]
        kind: Option<String>,
        /// Report path; predictions go next to it.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference checks of every op and the tiny full model.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Segment one dataset sample and print the response.
    Infer {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        /// Sample id whose prompts are used.
        #[arg(long, conflicts_with_all = ["request"])]
        sample: Option<String>,
        /// JSON segment request file.
        #[arg(long)]
        request: Option<PathBuf>,
    },
    /// HTTP inference service.
    Serve {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value_t = 8080)]
        port: u16,
    },
}

/// Parses `argv` and runs the subcommand, returning the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match commands::dispatch(cli.command) {
        Ok(true) => 0,
        Ok(false) => 1,
        Err(e) => {
            eprintln!("error: {e:#}");
            1
        }
    }
}
