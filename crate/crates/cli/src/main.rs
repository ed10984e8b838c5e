use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;

/// Description-based relation scoring: fixtures, training, evaluation.
#[derive(Parser, Debug)]
#[command(name = "ssd", version)]
struct Cli {
    /// Base directory for relative paths.
    #[arg(long, global = true, env = "SSD_DATA_DIR")]
    data_dir: Option<PathBuf>,

    /// Worker threads (default: all cores). Results do not depend on it.
    #[arg(long, global = true)]
    workers: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a seeded synthetic dataset fixture.
    Synth(SynthArgs),
    /// Check packs, dataset fixtures and checkpoints.
    Validate(ValidateArgs),
    /// Train the adapter on the base split.
    Train(TrainArgs),
    /// Score a split and report recall.
    Eval(EvalArgs),
    /// Per-description attribution for one sample.
    Score(ScoreArgs),
}

#[derive(Args, Debug)]
struct PackArg {
    /// Description pack directory (default: built-in pack at the data's width).
    #[arg(long)]
    pack: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 32)]
    dim: usize,
    #[arg(long, default_value_t = 4)]
    patches: usize,
    #[arg(long, default_value_t = 6)]
    relations: usize,
    #[arg(long, default_value_t = 60)]
    images: usize,
    #[arg(long, default_value_t = 3)]
    pairs_per_image: usize,
    #[arg(long, default_value_t = 1.0)]
    spread: f64,
    #[arg(long, default_value_t = 0.3)]
    novel_fraction: f64,
    #[command(flatten)]
    pack: PackArg,
}

#[derive(Args, Debug)]
struct ValidateArgs {
    #[arg(long)]
    pack: Vec<PathBuf>,
    #[arg(long)]
    data: Vec<PathBuf>,
    #[arg(long)]
    checkpoint: Vec<PathBuf>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    pack: PackArg,
    /// Checkpoint directory; the NDJSON log goes next to it.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "base")]
    split: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    momentum: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long = "lambda")]
    lambda_margin: Option<f64>,
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long)]
    max_per_relation: Option<usize>,
    /// Also keep a checkpoint after every epoch in `<out>/epoch-NNN`.
    #[arg(long)]
    save_every_epoch: bool,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    pack: PackArg,
    #[arg(long, required_unless_present = "baseline")]
    checkpoint: Option<PathBuf>,
    /// Skip the adapter and score relation names against the mean CLS.
    #[arg(long)]
    baseline: bool,
    /// Rank every relation for every pair instead of one per pair.
    #[arg(long)]
    no_graph_constraint: bool,
    /// Treat each pair as its own image.
    #[arg(long)]
    pair_level: bool,
    #[arg(long, value_delimiter = ',', default_values_t = [20, 50, 100])]
    ks: Vec<usize>,
    #[arg(long, default_value = "novel")]
    split: String,
    /// Default: the checkpoint's training temperature, else 10.
    #[arg(long)]
    temperature: Option<f64>,
    /// Write the JSON report here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also print a recall table (stdout with --out, else stderr).
    #[arg(long)]
    table: bool,
}

#[derive(Args, Debug)]
struct ScoreArgs {
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    pack: PackArg,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    sample: usize,
    /// Restrict to one split's relations (default: every relation in the data).
    #[arg(long)]
    split: Option<String>,
    #[arg(long)]
    temperature: Option<f64>,
}

/// A failure with its exit code.
pub struct Failure {
    code: u8,
    kind: String,
    message: String,
}

impl Failure {
    fn usage(message: impl Into<String>) -> Self {
        Failure {
            code: 2,
            kind: "usage".into(),
            message: message.into(),
        }
    }
}

impl From<ssd_core::Error> for Failure {
    fn from(e: ssd_core::Error) -> Self {
        // Bad option values are usage errors; everything else is a failed input.
        let code = if matches!(e, ssd_core::Error::Config(_)) { 2 } else { 1 };
        Failure {
            code,
            kind: e.kind().into(),
            message: e.to_string(),
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => e.exit(),
        Err(e) => {
            // First paragraph of clap's message, on one line.
            let text = e.to_string();
            let message: Vec<&str> = text
                .lines()
                .map(str::trim)
                .take_while(|l| !l.is_empty() && !l.starts_with("Usage:"))
                .collect();
            return report(Failure::usage(message.join(" ").trim_start_matches("error: ")));
        }
    };
    let workers = cli.workers;
    match ssd_core::par::with_workers(workers, || commands::run(cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => report(f),
    }
}

fn report(f: Failure) -> ExitCode {
    let line = serde_json::json!({ "error": f.kind, "exit_code": f.code, "message": f.message });
    eprintln!("{line}");
    ExitCode::from(f.code)
}
