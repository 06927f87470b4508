use std::path::PathBuf;

use clap::{Parser, Subcommand};

use tgfnet::cli;

#[derive(Parser)]
#[command(
    name = "tgfnet",
    version,
    about = "Optical-SAR visual question answering: synthetic data, training, evaluation, ablations, attention export"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate train/val/test dataset files plus a stats report.
    Gen {
        /// Master seed; the dataset is a pure function of (seed, config).
        #[arg(long)]
        seed: u64,
        /// Number of scenes to generate.
        #[arg(long)]
        scenes: u64,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Key=value config file; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Train a model and write checkpoint + metrics log.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Directory holding train.jsonl / val.jsonl.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: u64,
    },
    /// Evaluate a checkpoint: OA, AA, per-type accuracy table.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset file, or a directory (its test.jsonl is used).
        #[arg(long)]
        data: PathBuf,
        /// Optional report file (same text as stdout).
        #[arg(long)]
        report: Option<PathBuf>,
        /// Config override; defaults to config.txt next to the checkpoint.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Train and evaluate variants across seeds; emit a comparison table.
    Ablate {
        /// Variant name; repeatable (exp1..exp4, add, concat, xformer,
        /// opt-only, sar-only).
        #[arg(long = "variant", required = true)]
        variants: Vec<String>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        /// Comma-separated seed list.
        #[arg(long)]
        seeds: String,
        /// Optional file for the comparison table.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Export one sample's routing scores (CSV + PGM) and gate values.
    ExportAttention {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Record index within the dataset file.
        #[arg(long = "sample-id")]
        sample_id: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

fn main() {
    let cli = Cli::parse();
    let result = match cli.cmd {
        Cmd::Gen { seed, scenes, out, config } => {
            cli::cmd_gen(seed, scenes, &out, config.as_deref())
        }
        Cmd::Train { config, data, out, seed } => {
            cli::cmd_train(config.as_deref(), &data, &out, seed)
        }
        Cmd::Eval { checkpoint, data, report, config } => {
            cli::cmd_eval(&checkpoint, &data, report.as_deref(), config.as_deref())
        }
        Cmd::Ablate { variants, config, data, seeds, out } => {
            cli::cmd_ablate(&variants, config.as_deref(), &data, &seeds, out.as_deref())
        }
        Cmd::ExportAttention { checkpoint, data, sample_id, out, config } => {
            cli::cmd_export_attention(&checkpoint, &data, sample_id, &out, config.as_deref())
        }
    };
    if let Err(e) = result {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
