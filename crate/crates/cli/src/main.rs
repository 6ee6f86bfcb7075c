//! `cxr`: segmentation, classifier training, evaluation and inference.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "cxr", version, about = "Anatomy-masked chest X-ray classification")]
pub struct Cli {
    /// TOML run configuration. Built-in defaults apply without one.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Fixed seeds and a fixed evaluation order; repeated runs write identical tables.
    #[arg(long, global = true)]
    pub deterministic: bool,
    /// Train without the anatomical mask (features are left unweighted).
    #[arg(long, global = true)]
    pub no_mask: bool,
    /// Overrides the configured output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write synthetic segmentation and classification sets plus a config that uses them.
    Fixtures {
        dir: PathBuf,
        #[arg(long, default_value_t = 32)]
        samples: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
    },
    /// Train the lung/heart U-Net on the configured segmentation set.
    SegmentTrain,
    /// Generate anatomy masks into the mask cache.
    SegmentRun {
        /// Segmenter checkpoint [default: <out>/segmenter.safetensors].
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Images to segment; every manifest image when empty.
        images: Vec<PathBuf>,
    },
    /// Train the classifier on the train split.
    Train {
        /// Continue from the state left by an interrupted run.
        #[arg(long)]
        resume: bool,
        #[arg(long)]
        seg_checkpoint: Option<PathBuf>,
        #[arg(long, hide = true)]
        stop_after: Option<usize>,
        /// Weight features with an all-ones mask instead of the anatomy.
        #[arg(long, hide = true)]
        all_ones_mask: bool,
    },
    /// Per-disease AUROC and ROC curves on the test split.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        seg_checkpoint: Option<PathBuf>,
    },
    /// Box localisation IoU from class activation maps.
    Localize {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// A second classifier scored alongside, e.g. one trained with --no-mask.
        #[arg(long)]
        ablation: Option<PathBuf>,
        /// Also score heatmaps built from the ground-truth boxes themselves.
        #[arg(long)]
        oracle: bool,
        #[arg(long)]
        seg_checkpoint: Option<PathBuf>,
    },
    /// Predict findings for a list of images.
    Infer {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        seg_checkpoint: Option<PathBuf>,
        /// File with one image path per line.
        #[arg(long)]
        list: Option<PathBuf>,
        /// Write records here instead of stdout.
        #[arg(long)]
        output: Option<PathBuf>,
        images: Vec<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
