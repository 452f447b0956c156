//! `mvne`: generate datasets, train, evaluate, run ablation grids and
//! export embeddings. Every command writes into a run directory with a
//! `manifest.txt`.

mod commands;
mod run;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mvne::{AggregatorVariant, EncoderVariant};

/// Bad command-line input or settings (exit code 2).
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

/// A worker process that exited unsuccessfully.
#[derive(Debug)]
pub struct WorkerFailed {
    pub cell: String,
    pub code: u8,
}

impl fmt::Display for WorkerFailed {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "cell {} failed with exit code {}", self.cell, self.code)
    }
}

impl std::error::Error for WorkerFailed {}

pub const EXIT_USAGE: u8 = 2;
pub const EXIT_DATA: u8 = 3;
pub const EXIT_NUMERIC: u8 = 4;

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<UsageError>() {
            return EXIT_USAGE;
        }
        if let Some(w) = cause.downcast_ref::<WorkerFailed>() {
            return w.code;
        }
        if let Some(e) = cause.downcast_ref::<mvne::Error>() {
            return match e {
                mvne::Error::NonFinite { .. } | mvne::Error::Domain(_) => EXIT_NUMERIC,
                mvne::Error::Config(_) => EXIT_USAGE,
                _ => EXIT_DATA,
            };
        }
    }
    EXIT_DATA
}

#[derive(Parser)]
#[command(name = "mvne", version, about = "Multi-view network embedding with contrastive training")]
struct Cli {
    /// Parent of the run directories created when --out is not given.
    #[arg(long, global = true, default_value = "runs")]
    runs_root: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic multi-view dataset from a key=value spec file.
    Gen(GenArgs),
    /// Train on a dataset directory; writes a checkpoint, embeddings and the loss log.
    Train(TrainArgs),
    /// Score an embedding matrix with the logistic-regression probe and k-means.
    Eval(EvalArgs),
    /// Train and evaluate a set of model variants as parallel worker processes.
    Ablate(AblateArgs),
    /// Recompute embeddings from a checkpoint and write them as a text matrix.
    Export(ExportArgs),
    /// One ablation cell (spawned by `ablate`).
    #[command(hide = true)]
    Cell(CellArgs),
}

#[derive(Args)]
pub struct GenArgs {
    /// Spec file (n, c, views, p_in, p_out, complementary, attr_dim, attr_noise, seed).
    pub spec: PathBuf,
    /// Overrides the spec's seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Run directory (default: <runs-root>/<timestamp>-<hash>).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Clone, Default)]
pub struct ModelFlags {
    /// Training seed (trainer.seed).
    #[arg(long)]
    pub seed: Option<u64>,
    /// View encoder operator.
    #[arg(long, value_parser = parse_encoder)]
    pub encoder: Option<EncoderVariant>,
    /// View fusion operator.
    #[arg(long, value_parser = parse_aggregator)]
    pub aggregator: Option<AggregatorVariant>,
    /// Drop the inter-view negatives from the objective.
    #[arg(long)]
    pub no_infomin: bool,
}

fn parse_encoder(s: &str) -> Result<EncoderVariant, String> {
    s.parse().map_err(|_| format!("expected attention, mean or max, got {s:?}"))
}

fn parse_aggregator(s: &str) -> Result<AggregatorVariant, String> {
    s.parse().map_err(|_| format!("expected attention, mean or max, got {s:?}"))
}

#[derive(Args)]
pub struct TrainArgs {
    /// Dataset directory (*.edges, attributes.txt, optional labels.txt).
    pub dataset: PathBuf,
    /// key=value config file; flags override it, missing keys take defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub model: ModelFlags,
    /// Also write the per-node view weights as a text matrix.
    #[arg(long)]
    pub dump_view_weights: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct EvalOptions {
    /// Number of evaluation runs.
    #[arg(long, default_value_t = mvne::eval::DEFAULT_RUNS)]
    pub runs: usize,
    /// Fraction of labelled nodes used to fit the probe.
    #[arg(long, default_value_t = mvne::eval::DEFAULT_TRAIN_RATIO)]
    pub train_ratio: f64,
    /// Seed of the first run; run i uses seed + i.
    #[arg(long = "eval-seed", default_value_t = 0)]
    pub eval_seed: u64,
    /// Report clustering NMI only (labels are still required as reference).
    #[arg(long)]
    pub nmi_only: bool,
}

#[derive(Args)]
pub struct EvalArgs {
    /// Embedding matrix file, or a run directory containing embeddings.txt.
    pub embeddings: PathBuf,
    /// Label file (`node_id<TAB>label`).
    #[arg(long)]
    pub labels: Option<PathBuf>,
    /// Same as --eval-seed.
    #[arg(long)]
    pub seed: Option<u64>,
    #[command(flatten)]
    pub eval: EvalOptions,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct AblateArgs {
    /// Dataset directory with labels.
    pub dataset: PathBuf,
    /// `table` (five variants plus the full model), `grid` (all 18 cells),
    /// comma-separated names or keys, or a file listing them one per line.
    #[arg(long, default_value = "table")]
    pub grid: String,
    /// Base config shared by every cell.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Training seed for every cell.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker processes run at once.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    #[command(flatten)]
    pub eval: EvalOptions,
    /// Run directory; an existing ablation run with the same inputs is resumed.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct ExportArgs {
    /// Checkpoint file, or a training run directory containing model.ckpt.
    pub checkpoint: PathBuf,
    /// Dataset directory to embed.
    pub dataset: PathBuf,
    /// `fused` or a view index.
    #[arg(long, default_value = "fused")]
    pub which: String,
    /// Also write the per-node view weights.
    #[arg(long)]
    pub dump_view_weights: bool,
    /// Load a checkpoint whose stored config hash does not match.
    #[arg(long)]
    pub allow_hash_mismatch: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct CellArgs {
    pub dataset: PathBuf,
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub variant: String,
    #[command(flatten)]
    pub eval: EvalOptions,
    #[arg(long)]
    pub out: PathBuf,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_USAGE } else { 0 });
        }
    };
    let root = cli.runs_root;
    let result = match cli.command {
        Command::Gen(a) => commands::gen(&root, a),
        Command::Train(a) => commands::train(&root, a),
        Command::Eval(a) => commands::eval(&root, a),
        Command::Ablate(a) => commands::ablate(&root, a),
        Command::Export(a) => commands::export(&root, a),
        Command::Cell(a) => commands::cell(a),
    };
    match result {
        Ok(dir) => {
            println!("{}", dir.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
