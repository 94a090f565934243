//! `kpred`: dataset generation, training, database construction, inference and evaluation.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use kpred_core::Family;

/// Marks failures caused by the invocation itself (exit code 2).
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

#[derive(Debug, Parser)]
#[command(name = "kpred", version, about = "Keypoint-guided shape retrieval and deformation")]
struct Cli {
    /// Worker threads. Training defaults to 1, everything else to all cores.
    /// `KPRED_THREADS` caps this value.
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic shape family with database/train/test splits.
    GenData {
        #[arg(long)]
        family: Family,
        #[arg(long, default_value_t = 50)]
        db: usize,
        #[arg(long, default_value_t = 200)]
        train: usize,
        #[arg(long, default_value_t = 50)]
        test: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Points sampled per shape.
        #[arg(long, default_value_t = 2048)]
        points: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the deformation networks from scratch.
    TrainDeform {
        #[arg(long)]
        config: PathBuf,
    },
    /// Train the retrieval networks on top of a frozen deformation checkpoint.
    TrainRetrieval {
        #[arg(long)]
        config: PathBuf,
    },
    /// Train the partial-shape keypoint predictor on top of a frozen full bundle.
    TrainPartial {
        #[arg(long)]
        config: PathBuf,
    },
    /// Tokenize database shapes into an on-disk database.
    BuildDb {
        /// Dataset directory, or a directory of .ply/.obj files.
        #[arg(long)]
        shapes: Option<PathBuf>,
        /// Split to use when `--shapes` is a dataset directory.
        #[arg(long, default_value = "database")]
        split: String,
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Reload the database and regenerate every record with the bundle.
        #[arg(long)]
        verify: bool,
    },
    /// Retrieve and deform database shapes toward one target.
    Red {
        #[arg(long)]
        target: PathBuf,
        #[arg(long)]
        db: PathBuf,
        #[arg(long)]
        bundle: PathBuf,
        /// Treat the target as a partial scan.
        #[arg(long)]
        partial: bool,
        #[arg(long, default_value_t = 10)]
        topk: usize,
        /// Disable density weighting in partial retrieval.
        #[arg(long)]
        no_cb: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate top-k retrieval and deformation on a dataset split.
    Eval {
        #[arg(long, default_value = "test")]
        split: String,
        /// Dataset directory written by `gen-data`.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        db: PathBuf,
        #[arg(long)]
        bundle: PathBuf,
        /// Occlusion ratios; each one slices every target and adds one summary row.
        #[arg(long, num_args = 1..)]
        occlusion: Vec<f64>,
        #[arg(long)]
        partial: bool,
        #[arg(long, default_value_t = 10)]
        topk: usize,
        #[arg(long)]
        no_cb: bool,
        /// Seed for the occlusion slices.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output CSV.
        #[arg(long)]
        out: PathBuf,
    },
}

impl Command {
    fn is_training(&self) -> bool {
        matches!(
            self,
            Command::TrainDeform { .. } | Command::TrainRetrieval { .. } | Command::TrainPartial { .. }
        )
    }
}

fn worker_count(requested: Option<usize>, training: bool) -> usize {
    let default = if training {
        1
    } else {
        std::thread::available_parallelism().map_or(1, |n| n.get())
    };
    let cap = std::env::var("KPRED_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or(usize::MAX);
    requested.unwrap_or(default).clamp(1, cap)
}

fn exit_code(err: &anyhow::Error) -> u8 {
    use kpred_core::Error as E;
    if err.downcast_ref::<UsageError>().is_some() {
        return 2;
    }
    match err.downcast_ref::<E>() {
        Some(E::ArchMismatch(_) | E::FingerprintMismatch { .. } | E::InvalidArgument(_)) => 2,
        _ => 1,
    }
}

/// The error chain on one line, skipping causes already quoted by their parent.
fn describe(err: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in err.chain() {
        let text = cause.to_string();
        if !out.contains(&text) {
            if !out.is_empty() {
                out.push_str(": ");
            }
            out.push_str(&text);
        }
    }
    out
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::GenData {
            family,
            db,
            train,
            test,
            seed,
            points,
            out,
        } => commands::gen_data(family, db, train, test, seed, points, &out),
        Command::TrainDeform { config } => commands::train_deform(&config),
        Command::TrainRetrieval { config } => commands::train_retrieval(&config),
        Command::TrainPartial { config } => commands::train_partial(&config),
        Command::BuildDb {
            shapes,
            split,
            bundle,
            out,
            verify,
        } => commands::build_db(shapes.as_deref(), &split, &bundle, &out, verify),
        Command::Red {
            target,
            db,
            bundle,
            partial,
            topk,
            no_cb,
            out,
        } => commands::red(&target, &db, &bundle, partial, topk, !no_cb, &out),
        Command::Eval {
            split,
            data,
            db,
            bundle,
            occlusion,
            partial,
            topk,
            no_cb,
            seed,
            out,
        } => commands::eval(&commands::EvalArgs {
            split,
            data,
            db,
            bundle,
            occlusion,
            partial,
            topk,
            cb: !no_cb,
            seed,
            out,
        }),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let threads = worker_count(cli.workers, cli.command.is_training());
    if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global() {
        log::warn!("thread pool: {e}");
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", describe(&e));
            ExitCode::from(exit_code(&e))
        }
    }
}
