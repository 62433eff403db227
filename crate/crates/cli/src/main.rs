// SPDX-License-Identifier: Apache-2.0

//! `kne`: pretrain a toy model, build edit sets, and run the attribute,
//! select, edit and evaluate stages or whole studies.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use kne_core::attribution::AttributionMode;
use kne_core::experiments::{AttributionTarget, ExperimentKind};

#[derive(Debug, Parser)]
#[command(
    name = "kne",
    version,
    about = "Knowledge Neuronal Ensemble editing on toy transformers"
)]
pub struct Cli {
    /// Seed for every random stage.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Directory for outputs whose path is not given explicitly.
    #[arg(long, global = true, default_value = ".")]
    pub out_dir: PathBuf,
    /// JSON file overriding defaults (sections: world, model, pretrain,
    /// dataset, pipeline, grid).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model on a corpus file or on the configured synthetic world.
    Pretrain(PretrainArgs),
    /// Write the synthetic world's corpus.jsonl and an edits.jsonl.
    MakeDataset(MakeDatasetArgs),
    /// Score every neuron of the target matrices for an edit set.
    Attribute(AttributeArgs),
    /// Keep the top-scoring neurons as the ensemble.
    Select(SelectArgs),
    /// Optimize the ensemble rows toward the requested answers.
    Edit(EditArgs),
    /// Compute edit success, portability, locality and fluency.
    Evaluate(EvaluateArgs),
    /// Run a whole study and write its CSV and JSON summary.
    Experiment(ExperimentArgs),
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    /// JSONL corpus of `{"text": ...}` lines; defaults to the synthetic world.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Checkpoint path (default: OUT_DIR/model.json).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct MakeDatasetArgs {
    #[arg(long)]
    pub n_edits: Option<usize>,
    /// Locality probes per edit.
    #[arg(long)]
    pub locality: Option<usize>,
}

#[derive(Debug, Args)]
pub struct AttributeArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub edits: PathBuf,
    /// Riemann steps.
    #[arg(long)]
    pub steps: Option<usize>,
    /// Attribute over a seeded random subset of this many edits.
    #[arg(long)]
    pub subset: Option<usize>,
    /// Target path patterns (`*` matches any run of characters).
    #[arg(long, num_args = 1..)]
    pub paths: Option<Vec<String>>,
    #[arg(long, value_parser = parse_mode)]
    pub mode: Option<AttributionMode>,
    /// Answer to explain: `target-new` or `ground-truth`.
    #[arg(long, value_parser = parse_target)]
    pub target: Option<AttributionTarget>,
    /// Scores path (default: OUT_DIR/scores.json).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SelectArgs {
    #[arg(long)]
    pub scores: PathBuf,
    /// Fraction of neurons to keep.
    #[arg(long)]
    pub keep: Option<f64>,
    /// Apply the keep fraction within each layer instead of globally.
    #[arg(long)]
    pub per_layer: bool,
    /// Checkpoint for reporting the editable-parameter footprint.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Ensemble path (default: OUT_DIR/ensemble.json).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EditArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub ensemble: PathBuf,
    #[arg(long)]
    pub edits: PathBuf,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Edited-model path (default: OUT_DIR/edited.json).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub original: PathBuf,
    #[arg(long)]
    pub edited: PathBuf,
    #[arg(long)]
    pub edits: PathBuf,
    /// Report path (default: OUT_DIR/report.json).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ExperimentArgs {
    /// pipeline, location-study, subset-localization, keep-fraction-sweep
    /// or batch-size-sweep.
    #[arg(value_parser = parse_kind)]
    pub kind: ExperimentKind,
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub edits: PathBuf,
    /// Comma-separated grid values; overrides the config grid.
    #[arg(long, value_delimiter = ',')]
    pub grid: Option<Vec<f64>>,
}

fn parse_kind(s: &str) -> Result<ExperimentKind, String> {
    s.parse().map_err(|e: kne_core::KneError| e.to_string())
}

fn parse_mode(s: &str) -> Result<AttributionMode, String> {
    match s {
        "joint" => Ok(AttributionMode::Joint),
        "exact" => Ok(AttributionMode::Exact),
        _ => Err(format!("unknown mode `{s}` (joint or exact)")),
    }
}

fn parse_target(s: &str) -> Result<AttributionTarget, String> {
    match s {
        "target-new" => Ok(AttributionTarget::TargetNew),
        "ground-truth" => Ok(AttributionTarget::GroundTruth),
        _ => Err(format!("unknown target `{s}` (target-new or ground-truth)")),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            // Core errors already print their cause; skip causes repeated verbatim.
            let mut msg = e.to_string();
            for cause in e.chain().skip(1) {
                let c = cause.to_string();
                if !msg.contains(&c) {
                    msg = format!("{msg}: {c}");
                }
            }
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}
