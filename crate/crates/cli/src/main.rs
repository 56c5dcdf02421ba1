//! `kbridge`: run missing-modality completion, simulation and evaluation.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use kbridge_core::Modality;

use config::PipelineArgs;

/// Usage errors exit with 2, runtime failures with 1.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(anyhow::Error),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Runtime(e) => write!(f, "error: {e:#}"),
        }
    }
}

impl From<anyhow::Error> for CliError {
    fn from(e: anyhow::Error) -> Self {
        CliError::Runtime(e)
    }
}

#[derive(Debug, Parser)]
#[command(name = "kbridge", version, about = "Knowledge-graph guided missing-modality completion")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a missing-modality mask for a manifest
    Simulate {
        /// Dataset manifest (JSON)
        #[arg(long, env = "KB_MANIFEST")]
        manifest: PathBuf,
        /// Output mask file
        #[arg(long, env = "KB_MASK")]
        out: PathBuf,
        #[command(flatten)]
        pipeline: PipelineArgs,
    },
    /// Complete masked samples and persist a run directory
    Complete {
        /// Dataset manifest (JSON)
        #[arg(long, env = "KB_MANIFEST")]
        manifest: PathBuf,
        /// Mask from `simulate`; without it, samples missing a field are completed
        #[arg(long, env = "KB_MASK")]
        mask: Option<PathBuf>,
        /// Root directory for run directories
        #[arg(long, env = "KB_OUT_DIR", default_value = "runs")]
        out_dir: PathBuf,
        /// Run id [default: derived from the configuration]
        #[arg(long, env = "KB_RUN_ID")]
        run_id: Option<String>,
        #[command(flatten)]
        pipeline: PipelineArgs,
    },
    /// Extract structured knowledge and a graph for one sample
    Extract {
        /// Dataset manifest (JSON)
        #[arg(long, env = "KB_MANIFEST")]
        manifest: PathBuf,
        /// Sample id
        #[arg(long, env = "KB_SAMPLE")]
        sample: String,
        /// Withhold this modality before extracting
        #[arg(long, env = "KB_DROP")]
        drop: Option<Modality>,
        /// Write JSON here instead of stdout
        #[arg(long, env = "KB_OUT")]
        out: Option<PathBuf>,
        #[command(flatten)]
        pipeline: PipelineArgs,
    },
    /// Re-rank stored candidate sets, optionally with other weights or mode
    Rank {
        /// Run directory
        #[arg(long, env = "KB_RUN")]
        run: PathBuf,
        /// Only this sample
        #[arg(long, env = "KB_SAMPLE")]
        sample: Option<String>,
        #[command(flatten)]
        pipeline: PipelineArgs,
    },
    /// Recompute every stored score and compare bit for bit
    Replay {
        /// Run directory
        #[arg(long, env = "KB_RUN")]
        run: PathBuf,
        #[command(flatten)]
        pipeline: PipelineArgs,
    },
    /// Score predictions against gold labels, optionally with SS for a run
    Evaluate {
        /// Prediction table (CSV)
        #[arg(long, env = "KB_PRED")]
        pred: PathBuf,
        /// Gold labels (CSV, 0/1)
        #[arg(long, env = "KB_GOLD")]
        gold: PathBuf,
        /// Binarization threshold for F1
        #[arg(long, env = "KB_THRESHOLD", default_value_t = 0.5)]
        threshold: f64,
        /// Run directory whose chosen completions are scored for SS
        #[arg(long, env = "KB_RUN")]
        run: Option<PathBuf>,
        /// Manifest holding the ground truth for SS
        #[arg(long, env = "KB_MANIFEST")]
        manifest: Option<PathBuf>,
        /// Append the result row to this JSON-lines file
        #[arg(long, env = "KB_RESULTS")]
        append: Option<PathBuf>,
        #[command(flatten)]
        pipeline: PipelineArgs,
    },
    /// Render per-eta F1 | mAP | SS tables from evaluation rows
    Report {
        /// JSON-lines file written by `evaluate --append`
        #[arg(long, env = "KB_RESULTS")]
        results: PathBuf,
        /// Output markdown file
        #[arg(long, env = "KB_OUT")]
        out: PathBuf,
        #[arg(long, env = "KB_TITLE", default_value = "Evaluation")]
        title: String,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Simulate { manifest, out, pipeline } => commands::simulate(&manifest, &out, &pipeline.resolve()?),
        Command::Complete {
            manifest,
            mask,
            out_dir,
            run_id,
            pipeline,
        } => commands::complete(&manifest, mask.as_deref(), &out_dir, run_id, &pipeline.resolve()?),
        Command::Extract {
            manifest,
            sample,
            drop,
            out,
            pipeline,
        } => commands::extract(&manifest, &sample, drop, out.as_deref(), &pipeline.resolve()?),
        Command::Rank { run, sample, pipeline } => commands::rank(&run, sample.as_deref(), &pipeline),
        Command::Replay { run, pipeline } => commands::replay(&run, &pipeline),
        Command::Evaluate {
            pred,
            gold,
            threshold,
            run,
            manifest,
            append,
            pipeline,
        } => commands::evaluate(
            &pred,
            &gold,
            threshold,
            run.as_deref(),
            manifest.as_deref(),
            append.as_deref(),
            &pipeline,
        ),
        Command::Report { results, out, title } => commands::report(&results, &out, &title),
    }
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_env("KB_LOG").unwrap_or_else(|_| "warn".into()),
        )
        .with_writer(std::io::stderr)
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(match e {
                CliError::Usage(_) => 2,
                CliError::Runtime(_) => 1,
            })
        }
    }
}
