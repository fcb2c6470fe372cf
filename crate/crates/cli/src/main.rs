//! `organpp`: batch front end for preprocessing, ensembling, post-processing,
//! plan optimization, evaluation and phantom generation.
//!
//! Exit codes: 0 success, 2 I/O failure, 3 invalid input or configuration,
//! 4 computation failure.

mod commands;
mod error;
mod manifest;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::atomic::{AtomicBool, Ordering};

use clap::{Args, Parser, Subcommand};
use organpp::Connectivity;

use crate::error::CliError;

static QUIET: AtomicBool = AtomicBool::new(false);

/// Progress goes to stderr; results only to files and stdout.
pub fn progress(msg: std::fmt::Arguments<'_>) {
    if !QUIET.load(Ordering::Relaxed) {
        eprintln!("organpp: {msg}");
    }
}

#[derive(Parser)]
#[command(name = "organpp", version, about = "Organ segmentation post-processing toolkit")]
struct Cli {
    /// Worker threads (cases, patches and candidate evaluations).
    #[arg(long, global = true, default_value_t = 1, value_parser = clap::value_parser!(u16).range(1..))]
    jobs: u16,

    /// Suppress progress messages.
    #[arg(long, short, global = true)]
    quiet: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Resample and intensity-normalize the images of a manifest.
    Preprocess(PreprocessArgs),
    /// Average per-model softmax outputs and take the argmax.
    Ensemble(EnsembleArgs),
    /// Apply a post-processing plan to predicted label maps.
    Postprocess(PostprocessArgs),
    /// Search the best strategy per organ on cross-validation predictions.
    #[command(name = "optimize-pp")]
    OptimizePp(OptimizeArgs),
    /// Dice and confusion report, optionally before/after a plan.
    Evaluate(EvaluateArgs),
    /// Generate synthetic cases with controlled defects.
    Phantom(PhantomArgs),
}

/// Case sources: a manifest, or two directories of same-named NIfTI files.
#[derive(Args, Clone)]
pub struct CaseSource {
    #[arg(long, conflicts_with_all = ["preds", "refs"])]
    pub manifest: Option<PathBuf>,
    #[arg(long, requires = "refs")]
    pub preds: Option<PathBuf>,
    #[arg(long, requires = "preds")]
    pub refs: Option<PathBuf>,
}

#[derive(Args)]
pub struct PreprocessArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// `{"target_spacing":[z,y,x],"scheme":{"kind":"CT"|"ZScore",...}}`; a CT
    /// scheme without statistics is fitted on the manifest's reference foreground.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    /// Output directory; defaults to the manifest's `output_dir`.
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct EnsembleArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    /// Output directory; defaults to the manifest's `output_dir`.
    pub out: Option<PathBuf>,
    /// Write one 3D file per class instead of a single 4D file.
    #[arg(long)]
    pub per_class: bool,
    /// Replay each member through the sliding-window harness with this patch (z,y,x).
    #[arg(long, value_delimiter = ',', value_name = "Z,Y,X")]
    pub patch: Option<Vec<usize>>,
    #[arg(long, default_value_t = 0.5)]
    pub step: f64,
    #[arg(long, default_value_t = 0.125)]
    pub sigma: f64,
    #[arg(long)]
    pub no_gaussian: bool,
    /// Threshold-scorer JSON; adds a member scored from each case image.
    #[arg(long)]
    pub bands: Option<PathBuf>,
}

#[derive(Args)]
pub struct PostprocessArgs {
    /// Plan JSON, or `amos-task1` / `amos-task2` for the bundled plans.
    #[arg(long)]
    pub plan: Option<String>,
    #[arg(long, conflicts_with = "input", required_unless_present = "input")]
    pub manifest: Option<PathBuf>,
    /// A single label map; `--out` is then the output file.
    #[arg(long)]
    pub input: Option<PathBuf>,
    #[arg(long)]
    /// Output directory, or the output file with `--input`; defaults to the
    /// manifest's `output_dir`.
    pub out: Option<PathBuf>,
    #[arg(long, default_value = "26")]
    pub connectivity: Connectivity,
}

#[derive(Args)]
pub struct OptimizeArgs {
    #[command(flatten)]
    pub cases: CaseSource,
    #[arg(long)]
    pub organs: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_value = "0.1,0.25,0.5,0.75,0.9,0.95")]
    pub rates: Vec<f64>,
    /// Candidate strategies besides None.
    #[arg(long, value_delimiter = ',', default_value = "PP1,PP2,PP3,PP4")]
    pub strategies: Vec<organpp::StrategyKind>,
    #[arg(long, default_value = "26")]
    pub connectivity: Connectivity,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub trace: Option<PathBuf>,
}

#[derive(Args)]
pub struct EvaluateArgs {
    #[command(flatten)]
    pub cases: CaseSource,
    #[arg(long)]
    pub organs: Option<PathBuf>,
    /// Also report Dice after applying this plan.
    #[arg(long)]
    pub plan: Option<String>,
    #[arg(long, default_value = "26")]
    pub connectivity: Connectivity,
    #[arg(long)]
    /// Output directory; defaults to the manifest's `output_dir`.
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct PhantomArgs {
    #[arg(long)]
    pub spec: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Generate this many cases (seeds seed, seed+1, ...) into case_XXX directories.
    #[arg(long)]
    pub cases: Option<usize>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 3 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    QUIET.store(cli.quiet, Ordering::Relaxed);
    let pool = match rayon::ThreadPoolBuilder::new().num_threads(cli.jobs as usize).build() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("organpp: error: cannot start worker pool: {e}");
            return ExitCode::from(4);
        }
    };
    let result = pool.install(|| match cli.command {
        Command::Preprocess(a) => commands::preprocess(a),
        Command::Ensemble(a) => commands::ensemble(a),
        Command::Postprocess(a) => commands::postprocess(a),
        Command::OptimizePp(a) => commands::optimize(a),
        Command::Evaluate(a) => commands::evaluate(a),
        Command::Phantom(a) => commands::phantom(a),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => report(e),
    }
}

fn report(e: CliError) -> ExitCode {
    eprintln!("organpp: error: {e}");
    e.exit_code()
}
