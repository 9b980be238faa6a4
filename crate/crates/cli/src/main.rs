mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "chessrec", version, about = "Chess position recognition from a single image")]
struct Cli {
    /// TOML run config; flags override its keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Download and unpack a dataset archive into the output directory.
    Fetch {
        #[arg(required = true)]
        urls: Vec<String>,
        /// Expected SHA-256 per URL, in order.
        #[arg(long)]
        sha256: Vec<String>,
        #[arg(long)]
        require_checksum: bool,
    },
    /// Build and split an annotation document from PGN games.
    Build { pgn: PathBuf },
    /// Render synthetic photographs for every image of an annotation document.
    Render { annotations: PathBuf },
    /// Train a model on a dataset root or on synthetic renders.
    Train {
        /// Continue the checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Predict the placement of each image (files or directories).
    Predict {
        checkpoint: PathBuf,
        inputs: Vec<PathBuf>,
        /// Predict every image of one split of this annotation document.
        #[arg(long)]
        annotations: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: String,
        /// Write a JSONL prediction dump here.
        #[arg(long)]
        dump: Option<PathBuf>,
        /// Continue past unreadable images; the exit status still reports them.
        #[arg(long)]
        keep_going: bool,
    },
    /// Score a prediction dump against an annotation document.
    Evaluate {
        dump: PathBuf,
        annotations: PathBuf,
        #[arg(long)]
        orientation_search: bool,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).format_timestamp(None).init();
    let cli = Cli::parse();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(commands::exit_code(&e))
        }
    }
}
