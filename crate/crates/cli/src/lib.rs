//! `copydet` command-line driver.

pub mod commands;
pub mod ingest;
pub mod manifest;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use copydet_core::Error;
use serde::Serialize;

#[derive(Debug, Parser)]
#[command(name = "copydet", version, about = "Image copy detection evaluation")]
pub struct Cli {
    /// Worker threads (default: one per core).
    #[arg(long, global = true, env = "COPYDET_THREADS")]
    pub threads: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset with planted ground truth.
    Gen(GenArgs),
    /// Exact L2 search of queries against references, then full evaluation.
    EvalDescriptor(EvalDescriptorArgs),
    /// Evaluate a submitted candidate list.
    EvalMatching(EvalMatchingArgs),
    /// Normalize scores or descriptors against a background set.
    Normalize(NormalizeArgs),
    /// Fit per-transformation penalties from per-query APs.
    Penalty(PenaltyArgs),
    /// Breakdown tables from per-query APs and metadata.
    Report(ReportArgs),
    /// Pair up summary metrics of several report directories.
    Compare(CompareArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Scores,
    Subtract,
    Rescale,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct BgArgs {
    /// Background descriptor file.
    #[arg(long)]
    pub bg: Option<PathBuf>,
    #[arg(long, default_value_t = copydet_core::normalize::DEFAULT_BG_N)]
    pub bg_n: usize,
    #[arg(long, default_value_t = copydet_core::normalize::DEFAULT_BG_BETA)]
    pub bg_beta: f64,
    /// Optional per-rank weights for the n background neighbours.
    #[arg(long, value_delimiter = ',')]
    pub bg_weights: Option<Vec<f64>>,
    #[arg(long, value_enum, default_value_t = Mode::Scores)]
    pub mode: Mode,
    #[arg(long, default_value_t = copydet_core::normalize::DEFAULT_RESCALE_EXPONENT, allow_hyphen_values = true)]
    pub rescale_exponent: f64,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct BinArgs {
    /// Remaining-surface bin edges for crops.
    #[arg(long, value_delimiter = ',', default_values_t = [0.06, 0.12, 0.25, 0.5])]
    pub crop_bins: Vec<f64>,
    /// Foreign-pixel-fraction bin edges for overlays.
    #[arg(long, value_delimiter = ',', default_values_t = [0.2, 0.4, 0.6, 0.8])]
    pub overlay_bins: Vec<f64>,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct GenArgs {
    /// JSON configuration; missing fields take their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct EvalDescriptorArgs {
    #[arg(long)]
    pub queries: PathBuf,
    #[arg(long)]
    pub refs: PathBuf,
    #[arg(long)]
    pub gt: PathBuf,
    #[arg(long)]
    pub metadata: Option<PathBuf>,
    #[arg(long, default_value_t = 10)]
    pub k: usize,
    #[arg(long, default_value_t = copydet_core::model::DEFAULT_MAX_DIM)]
    pub max_dim: usize,
    #[arg(long, default_value_t = copydet_core::penalty::DEFAULT_LAMBDA)]
    pub lambda: f64,
    #[command(flatten)]
    #[serde(flatten)]
    pub bg: BgArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub bins: BinArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct EvalMatchingArgs {
    #[arg(long)]
    pub candidates: PathBuf,
    #[arg(long)]
    pub gt: PathBuf,
    #[arg(long)]
    pub metadata: Option<PathBuf>,
    #[arg(long, default_value_t = copydet_core::penalty::DEFAULT_LAMBDA)]
    pub lambda: f64,
    /// Rows held in memory before sorting on disk.
    #[arg(long, default_value_t = ingest::DEFAULT_ROW_BUDGET)]
    pub row_budget: usize,
    #[command(flatten)]
    #[serde(flatten)]
    pub bins: BinArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct NormalizeArgs {
    #[arg(long)]
    pub queries: PathBuf,
    /// References, normalized alongside the queries in subtract mode.
    #[arg(long)]
    pub refs: Option<PathBuf>,
    /// Candidate list to rescore in scores mode.
    #[arg(long)]
    pub candidates: Option<PathBuf>,
    #[arg(long, default_value_t = copydet_core::model::DEFAULT_MAX_DIM)]
    pub max_dim: usize,
    #[command(flatten)]
    #[serde(flatten)]
    pub bg: BgArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct PenaltyArgs {
    /// `query_id,ap` table.
    #[arg(long)]
    pub aps: PathBuf,
    #[arg(long)]
    pub metadata: PathBuf,
    #[arg(long, default_value_t = copydet_core::penalty::DEFAULT_LAMBDA)]
    pub lambda: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct ReportArgs {
    #[arg(long)]
    pub aps: PathBuf,
    #[arg(long)]
    pub metadata: Option<PathBuf>,
    /// With --gt, adds the micro-AP and precision-recall series.
    #[arg(long, requires = "gt")]
    pub candidates: Option<PathBuf>,
    #[arg(long)]
    pub gt: Option<PathBuf>,
    /// Adds a penalty table (requires --metadata).
    #[arg(long, requires = "metadata")]
    pub lambda: Option<f64>,
    #[command(flatten)]
    #[serde(flatten)]
    pub bins: BinArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    MicroAp,
    Map,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct CompareArgs {
    /// Report directories for the x axis.
    #[arg(long, num_args = 1.., required = true)]
    pub x: Vec<PathBuf>,
    /// Report directories for the y axis, paired with --x in order.
    #[arg(long, num_args = 1.., required = true)]
    pub y: Vec<PathBuf>,
    #[arg(long, value_enum, default_value_t = Metric::MicroAp)]
    pub metric: Metric,
    #[arg(long)]
    pub out: PathBuf,
}

impl Command {
    fn out(&self) -> &std::path::Path {
        match self {
            Command::Gen(a) => &a.out,
            Command::EvalDescriptor(a) => &a.out,
            Command::EvalMatching(a) => &a.out,
            Command::Normalize(a) => &a.out,
            Command::Penalty(a) => &a.out,
            Command::Report(a) => &a.out,
            Command::Compare(a) => &a.out,
        }
    }
}

pub const EXIT_INPUT: u8 = 2;
pub const EXIT_COMPUTATION: u8 = 3;

pub fn exit_code(e: &Error) -> u8 {
    if e.is_input_error() {
        EXIT_INPUT
    } else {
        EXIT_COMPUTATION
    }
}

/// Machine-readable error document.
pub fn error_json(e: &Error) -> serde_json::Value {
    let mut doc = serde_json::json!({
        "error": e.kind(),
        "message": e.to_string(),
        "exit_code": exit_code(e),
    });
    if let Error::InvalidMetadata(issues) = e {
        doc["issues"] = issues
            .iter()
            .map(|i| serde_json::json!({"line": i.line, "query_id": i.query_id, "message": i.message}))
            .collect();
    }
    doc
}

/// Runs one command; on failure prints the error document to stderr,
/// writes it to `<out>/error.json` when possible, and returns the exit code.
pub fn run(cli: Cli) -> u8 {
    let result = (|| {
        if let Some(t) = cli.threads {
            if t == 0 {
                return Err(Error::InvalidArgument("--threads must be positive".into()));
            }
            rayon::ThreadPoolBuilder::new()
                .num_threads(t)
                .build_global()
                .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?;
        }
        commands::dispatch(&cli.command)
    })();
    match result {
        Ok(()) => 0,
        Err(e) => {
            let doc = error_json(&e);
            let text = serde_json::to_string_pretty(&doc).unwrap_or_default();
            eprintln!("{text}");
            let out = cli.command.out();
            if std::fs::create_dir_all(out).is_ok() {
                let _ = std::fs::write(out.join("error.json"), text + "\n");
            }
            exit_code(&e)
        }
    }
}
