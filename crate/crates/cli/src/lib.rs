//! Command-line front end for `exitweave`.
//!
//! ```text
//! exitweave train     --config run.toml [--seed N] [--out DIR] [--dataset data.toml]
//! exitweave eval      --checkpoint DIR/checkpoint.json [--dataset data.toml] [--q-grid 0.1,0.5,1] [--out DIR]
//! exitweave gradcheck [--config tiny.toml] [--seed N] [--out report.json]
//! exitweave allocate  --confidences table.csv --q 0.5 [--exits K]
//! ```
//!
//! Training drops the trailing partial mini-batch of every epoch (the L2W
//! step needs two equal halves); evaluation always uses every sample.
//! `EXITWEAVE_THREADS` caps the worker pool.
//!
//! Exit codes: 0 success, 1 runtime or verification failure, 2 bad usage,
//! bad configuration or a missing input file.

pub mod commands;
pub mod config;
pub mod metrics;

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;

use clap::{Parser, Subcommand};

use exitweave::gradcheck::Sabotage;

use commands::{
    cmd_allocate, cmd_eval, cmd_gradcheck, cmd_train, parse_q_grid, EvalOptions, TrainOverrides, CHECKPOINT_FILE,
};

pub const THREADS_ENV: &str = "EXITWEAVE_THREADS";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("file not found: {}", .0.display())]
    MissingFile(PathBuf),
    #[error("usage: {0}")]
    Usage(String),
    #[error("config: {0}")]
    Config(String),
    #[error("format: {0}")]
    Format(String),
    #[error("compatibility: {0}")]
    Compatibility(String),
    #[error("numeric: {0}")]
    Numeric(String),
}

#[derive(Debug, Parser)]
#[command(name = "exitweave", version, about = "Multi-exit classifiers with meta-learned sample weights")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model and write checkpoint, resolved config and history.
    ///
    /// The trailing partial mini-batch of each epoch is dropped.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory (overrides `[output] dir`).
        #[arg(long)]
        out: Option<PathBuf>,
        /// File with a `[dataset]` table replacing the config's.
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Anytime table and budget sweep for a trained checkpoint.
    ///
    /// Thresholds are calibrated on the validation split and applied to the
    /// test split; every sample is evaluated.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Comma-separated budgets q; defaults to 0.05, 0.10, ..., 2.00.
        #[arg(long)]
        q_grid: Option<String>,
        /// Output directory; defaults to the checkpoint's directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference check of every analytic gradient.
    Gradcheck {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Also write the report as JSON here.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, hide = true)]
        sabotage: bool,
    },
    /// Meta-data allocation and thresholds for a table of confidences.
    Allocate {
        /// CSV with one row per sample and one column per exit.
        #[arg(long)]
        confidences: PathBuf,
        #[arg(long)]
        q: f64,
        #[arg(long)]
        exits: Option<usize>,
    },
}

/// Caps the global worker pool when `EXITWEAVE_THREADS` is set.
pub fn configure_threads() -> anyhow::Result<()> {
    let Ok(value) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = value
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::Usage(format!("{THREADS_ENV} must be a positive integer, got {value:?}")))?;
    // A pool may already exist when called twice in one process; keep it.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

/// Exit code for an error chain.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<CliError>() {
            return match e {
                CliError::MissingFile(_) | CliError::Usage(_) | CliError::Config(_) => 2,
                _ => 1,
            };
        }
        if let Some(e) = cause.downcast_ref::<exitweave::Error>() {
            return match e {
                exitweave::Error::Config(_) | exitweave::Error::Usage(_) => 2,
                _ => 1,
            };
        }
    }
    1
}

/// Runs one invocation, writing human-readable output to `out` and
/// diagnostics to `err`. Returns the process exit code.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = e.exit_code();
            let _ = if code == 0 {
                write!(out, "{e}")
            } else {
                write!(err, "{e}")
            };
            return code;
        }
    };
    match dispatch(cli.command, out) {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "error: {e:#}");
            exit_code(&e)
        }
    }
}

fn dispatch(command: Command, out: &mut dyn Write) -> anyhow::Result<i32> {
    configure_threads()?;
    match command {
        Command::Train {
            config,
            seed,
            out: dir,
            dataset,
        } => {
            let outcome = cmd_train(&config, &TrainOverrides { seed, out: dir, dataset })?;
            for w in &outcome.warnings {
                writeln!(out, "warning: {w}")?;
            }
            if let Some(last) = outcome.history.epochs.last() {
                let acc: Vec<String> = last.anytime_accuracy.iter().map(|a| format!("{a:.4}")).collect();
                writeln!(out, "epoch {}: val anytime accuracy [{}]", last.epoch + 1, acc.join(", "))?;
            }
            writeln!(out, "run {}", outcome.resolved.run_id())?;
            writeln!(out, "wrote {}", outcome.dir.join(CHECKPOINT_FILE).display())?;
            Ok(0)
        }
        Command::Eval {
            checkpoint,
            dataset,
            q_grid,
            out: dir,
        } => {
            let q_grid = q_grid.as_deref().map(parse_q_grid).transpose()?;
            let outcome = cmd_eval(&checkpoint, &EvalOptions { dataset, q_grid, out: dir })?;
            writeln!(out, "exit  accuracy  mul_adds")?;
            for r in &outcome.metrics.anytime {
                writeln!(out, "{:>4}  {:>8.4}  {:>8}", r.exit, r.accuracy, r.mul_adds)?;
            }
            writeln!(out, "{:>6}  {:>8}  {:>12}", "q", "accuracy", "mul_adds")?;
            for r in &outcome.metrics.sweep {
                writeln!(out, "{:>6.3}  {:>8.4}  {:>12.1}", r.q, r.accuracy, r.expected_mul_adds)?;
            }
            writeln!(out, "wrote {}", outcome.dir.join(commands::METRICS_FILE).display())?;
            Ok(0)
        }
        Command::Gradcheck {
            config,
            seed,
            out: report_path,
            sabotage,
        } => {
            let sabotage = if sabotage {
                Sabotage::FlipMetaWeightSign
            } else {
                Sabotage::None
            };
            let outcome = cmd_gradcheck(config.as_deref(), seed, sabotage)?;
            for s in &outcome.suites {
                writeln!(
                    out,
                    "{:<18} max rel err {:.3e}  tol {:.0e}  checks {:>4}  {}",
                    s.name,
                    s.max_rel_err,
                    s.tolerance,
                    s.checks,
                    if s.passed() { "ok" } else { "FAIL" }
                )?;
            }
            if let Some(path) = report_path {
                std::fs::write(&path, serde_json::to_string_pretty(&outcome)? + "\n")?;
            }
            Ok(if outcome.passed() { 0 } else { 1 })
        }
        Command::Allocate { confidences, q, exits } => {
            let outcome = cmd_allocate(&confidences, q, exits)?;
            writeln!(out, "sizes {:?}", outcome.sizes)?;
            for (k, subset) in outcome.subsets.iter().enumerate() {
                writeln!(out, "exit {}: {:?}", k + 1, subset)?;
            }
            writeln!(out, "thresholds {:?}", outcome.thresholds)?;
            Ok(0)
        }
    }
}
