//! `orefsdet` command-line interface.
//!
//! Exit codes: 0 success, 1 usage, 2 data or I/O error, 3 failed check.

mod commands;
mod overlay;

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;

use clap::{Parser, Subcommand};

pub use commands::Failure;

#[derive(Debug, Parser)]
#[command(name = "orefsdet", version, about = "Few-shot ore detection: synthesis, training, inference and evaluation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render synthetic scenes and write COCO-style annotations.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 100)]
        images: usize,
        #[arg(long, default_value = "medium")]
        density: orefsdet::data::Density,
        /// `ore`, `base` or `all`.
        #[arg(long, default_value = "ore")]
        classes: String,
        #[arg(long, default_value_t = 320)]
        size: usize,
    },
    /// Train every parameter on base classes.
    BaseTrain {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// COCO-style annotations; synthetic base scenes when omitted.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Continue from a checkpoint at its stored iteration.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// JSON-lines loss log (stderr when omitted).
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Fine-tune on K annotated novel-class images with the extractor frozen.
    Finetune {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        init: PathBuf,
        #[arg(long)]
        shots: usize,
        #[arg(long)]
        out: PathBuf,
        /// COCO-style annotations; the first K novel-class images form the shot set.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Detect in every query of an episode directory (`supports/`, `queries/`).
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        episode_dir: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        overlay: Option<PathBuf>,
    },
    /// Evaluate a fine-tuned checkpoint.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        /// COCO-style annotations: first K novel images are supports, the rest queries.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        shots: usize,
        /// Also write the report as JSON.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Time single-threaded inference and report size figures.
    Bench {
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long, default_value_t = 5)]
        warmup: usize,
        #[arg(long, default_value_t = 50)]
        iters: usize,
    },
    /// Central-difference gradient checks over every op and block.
    Gradcheck {
        #[arg(long)]
        op: Option<String>,
        #[arg(long, default_value_t = 20)]
        trials: usize,
        /// Add this offset to analytic gradients (the run must then fail).
        #[arg(long)]
        inject_fault: Option<f64>,
    },
}

/// Caps the rayon pool from `ORE_FSDET_THREADS` (ignored if already set up).
fn init_threads() {
    if let Some(n) = std::env::var("ORE_FSDET_THREADS").ok().and_then(|v| v.parse::<usize>().ok()).filter(|&n| n > 0) {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
}

/// Parses `args` and runs the command; returns the process exit code.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = if code == 0 { write!(out, "{e}") } else { write!(err, "{e}") };
            return code;
        }
    };
    init_threads();
    match commands::dispatch(cli.command, out, err) {
        Ok(()) => 0,
        Err(e) => {
            let code = match e.downcast_ref::<Failure>() {
                Some(Failure::Check(_)) => 3,
                Some(Failure::Usage(_)) => 1,
                None => 2,
            };
            let _ = writeln!(err, "error: {e:#}");
            code
        }
    }
}
