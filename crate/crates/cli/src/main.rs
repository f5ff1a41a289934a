//! `tvmerge`: task-arithmetic merging and task-vector diagnostics for
//! safetensors checkpoints.
//!
//! Exit codes: 0 success, 1 I/O or invalid data, 2 misaligned checkpoints,
//! 64 usage error.

mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, CommandFactory, Parser, Subcommand};
use tvmerge_core::Error;

pub const EXIT_FAILURE: u8 = 1;
pub const EXIT_MISALIGNED: u8 = 2;
pub const EXIT_USAGE: u8 = 64;

#[derive(Parser, Debug)]
#[command(name = "tvmerge", version, about = "Task-arithmetic checkpoint merging and task-vector diagnostics")]
pub struct Cli {
    /// Worker threads (0 = available parallelism). Never changes output bytes.
    #[arg(long, global = true, default_value_t = 0)]
    pub threads: usize,

    /// Bytes of 32-bit working values per streamed chunk [default: 8 MiB].
    #[arg(long, global = true)]
    pub chunk_bytes: Option<usize>,

    /// Only print errors.
    #[arg(long, global = true)]
    pub quiet: bool,

    /// Machine-readable stdout.
    #[arg(long, global = true)]
    pub json: bool,

    /// Report shard tensors missing from the index as warnings instead of errors.
    #[arg(long, global = true)]
    pub lenient: bool,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Build domain + (instruct - base) as a new checkpoint.
    Merge(MergeArgs),
    /// Export target - base as a checkpoint.
    Taskvec(TaskvecArgs),
    /// Per-tensor difference statistics between two checkpoints.
    Diff(DiffArgs),
    /// Cosine similarity between the task vectors a - base and b - base.
    Cosine(CosineArgs),
    /// List tensors, dtypes, shapes and shards.
    Inspect(PathArgs),
    /// Strictly validate headers, ranges and index consistency.
    Verify(PathArgs),
    /// Score prediction files (accuracy ± stderr, F1) and aggregate.
    Score(ScoreArgs),
}

#[derive(Args, Debug, Default)]
pub struct MergeArgs {
    /// General pretrained checkpoint.
    #[arg(long)]
    pub base: Option<PathBuf>,
    /// Instruction-tuned variant of the base.
    #[arg(long)]
    pub instruct: Option<PathBuf>,
    /// Domain continual-pretrained checkpoint.
    #[arg(long)]
    pub domain: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// TOML recipe; command-line flags take precedence over its values.
    #[arg(long)]
    pub recipe: Option<PathBuf>,
    #[arg(long, allow_negative_numbers = true)]
    pub lambda_domain: Option<f32>,
    #[arg(long, allow_negative_numbers = true)]
    pub lambda_instruct: Option<f32>,
    /// `inherit`, `F32`, `F16` or `BF16`.
    #[arg(long)]
    pub output_dtype: Option<String>,
    /// Glob of tensor names copied verbatim from the domain checkpoint (repeatable).
    #[arg(long)]
    pub skip: Vec<String>,
    /// Maximum tensor bytes per output shard [default: 4 GiB].
    #[arg(long)]
    pub max_shard_bytes: Option<u64>,
}

#[derive(Args, Debug)]
pub struct TaskvecArgs {
    #[arg(long)]
    pub target: PathBuf,
    #[arg(long)]
    pub base: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value = "F32")]
    pub dtype: String,
    #[arg(long)]
    pub max_shard_bytes: Option<u64>,
}

#[derive(Args, Debug)]
pub struct DiffArgs {
    #[arg(long)]
    pub a: PathBuf,
    #[arg(long)]
    pub b: PathBuf,
    /// Also write the JSON report here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct CosineArgs {
    #[arg(long)]
    pub base: PathBuf,
    #[arg(long)]
    pub a: PathBuf,
    #[arg(long)]
    pub b: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// `json`, `csv` or `svg`.
    #[arg(long, default_value = "json")]
    pub format: String,
}

#[derive(Args, Debug)]
pub struct PathArgs {
    pub path: PathBuf,
}

#[derive(Args, Debug)]
pub struct ScoreArgs {
    /// JSON-lines prediction file (repeatable). Records without "task" use the file stem.
    #[arg(long, required = true)]
    pub preds: Vec<PathBuf>,
    /// JSON-lines gold file for records that do not embed "gold".
    #[arg(long)]
    pub gold: Option<PathBuf>,
    /// JSON object mapping task name to aggregation weight.
    #[arg(long)]
    pub weights: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// A failed command and its exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    pub fn usage(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_USAGE,
            message: message.into(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::MisalignedCheckpoints(_) | Error::DTypeConflict { .. } => EXIT_MISALIGNED,
            Error::InvalidArgument(_) | Error::UnknownTaskInWeights(_) => EXIT_USAGE,
            _ => EXIT_FAILURE,
        };
        let message = match &e {
            Error::MisalignedCheckpoints(report) => format!(
                "checkpoints are misaligned\n{}",
                serde_json::to_string_pretty(report).unwrap_or_else(|_| report.to_string())
            ),
            _ => e.to_string(),
        };
        Self { code, message }
    }
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        match e.downcast::<Error>() {
            Ok(core) => core.into(),
            Err(e) => Self {
                code: EXIT_FAILURE,
                message: format!("{e:#}"),
            },
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            let _ = e.print();
            return ExitCode::from(EXIT_USAGE);
        }
    };

    let level = if cli.quiet { "error" } else { "warn" };
    tracing_subscriber::fmt()
        .with_writer(std::io::stderr)
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env()
                .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new(level)),
        )
        .init();

    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            if f.code == EXIT_USAGE {
                eprintln!("\n{}", Cli::command().render_usage());
            }
            ExitCode::from(f.code)
        }
    }
}
