//! `dac`: few-shot adaptation of frozen image-text embeddings.
//!
//! Every subcommand prints one JSON document on stdout. Diagnostics go to
//! stderr. Exit codes: 0 ok, 2 usage, 3 I/O, 4 invariant, 5 numeric.

mod commands;

use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use dac_core::inference::{Method, DEFAULT_BETA};
use dac_core::{AlphaGrid, BatchPolicy, Error};

#[derive(Parser)]
#[command(name = "dac", version, about = "Few-shot adaptation over precomputed image-text embeddings")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a seeded synthetic benchmark (text, train, cache, val, test bundles).
    Synth(SynthArgs),
    /// Normalize a text bundle into a text cache file.
    BuildTextCache(BuildTextCacheArgs),
    /// Build a visual key-value cache from a cache-split bundle.
    BuildCache(BuildCacheArgs),
    /// Train the linear visual adapter.
    TrainVisual(TrainVisualArgs),
    /// Fine-tune the text cache under the frozen adapted ensemble.
    TrainText(TrainTextArgs),
    /// Evaluate one classifier on a bundle.
    Eval(EvalArgs),
    /// Grid-search the ensemble weight on a validation bundle.
    GridAlpha(GridAlphaArgs),
    /// Accuracy of the visual cache alone.
    IntraAcc(IntraAccArgs),
    /// Agreement and flip statistics between the two sub-classifiers.
    AnalyzeFlips(AnalyzeFlipsArgs),
    /// Collect eval reports into a method x shots CSV table.
    Table(TableArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Output directory; created if missing.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 10)]
    classes: usize,
    #[arg(long, default_value_t = 16)]
    shots: usize,
    #[arg(long, default_value_t = 16)]
    dim: usize,
    #[arg(long, default_value_t = 6)]
    nuisance_dims: usize,
    #[arg(long, default_value_t = 2)]
    train_views: usize,
    #[arg(long, default_value_t = 10)]
    cache_views: usize,
    #[arg(long, default_value_t = 30)]
    val_per_class: usize,
    #[arg(long, default_value_t = 30)]
    test_per_class: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct BuildTextCacheArgs {
    /// Text embedding bundle.
    #[arg(long)]
    text: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

/// Seeded per-class shot subsampling shared by every training-side command.
#[derive(Args, Clone, Copy)]
struct ShotArgs {
    /// Keep this many shots per class (all when omitted).
    #[arg(long)]
    shots: Option<usize>,
    /// Seed of the shot choice; use the same value for train and cache bundles.
    #[arg(long, default_value_t = 0)]
    shot_seed: u64,
}

#[derive(Args)]
struct BuildCacheArgs {
    /// Cache-split image bundle.
    #[arg(long)]
    bundle: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// One key per class (normalized mean of all its views) instead of one per shot.
    #[arg(long)]
    prototype: bool,
    /// Views averaged into each key.
    #[arg(long, default_value_t = 10)]
    cache_views: usize,
    #[command(flatten)]
    shots: ShotArgs,
}

#[derive(Clone, Copy, ValueEnum)]
enum PolicyArg {
    /// One pair index per step, all classes in the batch.
    PerClassPair,
    /// All pairs in one step.
    FullBatch,
}

impl From<PolicyArg> for BatchPolicy {
    fn from(p: PolicyArg) -> Self {
        match p {
            PolicyArg::PerClassPair => BatchPolicy::PerClassPair,
            PolicyArg::FullBatch => BatchPolicy::FullBatch,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ObjectiveArg {
    Contrastive,
    CrossEntropy,
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    ZeroShot,
    Tip,
    DacV,
    DacVt,
}

impl From<MethodArg> for Method {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::ZeroShot => Method::ZeroShot,
            MethodArg::Tip => Method::Tip,
            MethodArg::DacV => Method::DacV,
            MethodArg::DacVt => Method::DacVt,
        }
    }
}

#[derive(Args, Clone, Copy)]
struct GridArgs {
    #[arg(long, default_value_t = 0.1)]
    alpha_lo: f64,
    #[arg(long, default_value_t = 10.0)]
    alpha_hi: f64,
    #[arg(long, default_value_t = 0.01)]
    alpha_step: f64,
}

impl From<GridArgs> for AlphaGrid {
    fn from(g: GridArgs) -> Self {
        AlphaGrid {
            lo: g.alpha_lo,
            hi: g.alpha_hi,
            step: g.alpha_step,
        }
    }
}

#[derive(Args)]
struct TrainVisualArgs {
    /// Train-split bundle with augmented views.
    #[arg(long)]
    train: PathBuf,
    /// Unadapted visual cache file.
    #[arg(long)]
    cache: PathBuf,
    /// Text cache or text bundle.
    #[arg(long)]
    text: PathBuf,
    /// Validation bundle for checkpoint selection.
    #[arg(long)]
    val: Option<PathBuf>,
    /// Adapter output path.
    #[arg(long)]
    out: PathBuf,
    /// Also write the full per-epoch log as JSON.
    #[arg(long)]
    log: Option<PathBuf>,
    #[arg(long, default_value_t = 3e-5)]
    lr: f64,
    #[arg(long, default_value_t = 0.008)]
    tau: f64,
    #[arg(long, default_value_t = 500)]
    epochs: usize,
    #[arg(long, default_value_t = 7)]
    views_per_shot: usize,
    #[arg(long, value_enum, default_value = "per-class-pair")]
    batch_policy: PolicyArg,
    #[arg(long, value_enum, default_value = "contrastive")]
    objective: ObjectiveArg,
    /// Number of stacked linear layers (ReLU between them).
    #[arg(long, default_value_t = 1)]
    depth: usize,
    /// Ensemble weight of the cross-entropy objective.
    #[arg(long, default_value_t = 1.0)]
    xent_alpha: f64,
    /// Validate every this many epochs.
    #[arg(long, default_value_t = 10)]
    val_every: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    shots: ShotArgs,
    #[command(flatten)]
    grid: GridArgs,
}

#[derive(Args)]
struct TrainTextArgs {
    #[arg(long)]
    train: PathBuf,
    /// Unadapted visual cache file.
    #[arg(long)]
    cache: PathBuf,
    #[arg(long)]
    text: PathBuf,
    #[arg(long)]
    adapter: PathBuf,
    /// Tuned text cache output path.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    log: Option<PathBuf>,
    #[arg(long, default_value_t = 1e-5)]
    lr: f64,
    #[arg(long, default_value_t = 100)]
    epochs: usize,
    #[arg(long, default_value_t = 7)]
    views_per_shot: usize,
    /// Use every view in the bundle (overrides --views-per-shot).
    #[arg(long)]
    all_views: bool,
    #[arg(long, value_enum, default_value = "per-class-pair")]
    batch_policy: PolicyArg,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    shots: ShotArgs,
}

/// Artifacts that define a classifier.
#[derive(Args)]
struct ModelArgs {
    #[arg(long, value_enum)]
    method: MethodArg,
    /// Text cache or text bundle.
    #[arg(long)]
    text: PathBuf,
    /// Unadapted visual cache (tip, dac-v, dac-vt).
    #[arg(long)]
    cache: Option<PathBuf>,
    /// Trained adapter (dac-v, dac-vt).
    #[arg(long)]
    adapter: Option<PathBuf>,
    /// Tuned text cache (dac-vt).
    #[arg(long)]
    tuned_text: Option<PathBuf>,
    /// Affinity sharpness of the unadapted cache.
    #[arg(long, default_value_t = DEFAULT_BETA)]
    beta: f64,
}

/// Where the ensemble weight comes from: fixed, searched, or the fallback.
#[derive(Args)]
struct AlphaArgs {
    #[arg(long, conflicts_with = "val")]
    alpha: Option<f64>,
    /// Validation bundle for the alpha search.
    #[arg(long)]
    val: Option<PathBuf>,
    #[command(flatten)]
    grid: GridArgs,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Bundle to evaluate (usually the test split).
    #[arg(long)]
    bundle: PathBuf,
    #[command(flatten)]
    alpha: AlphaArgs,
}

#[derive(Args)]
struct GridAlphaArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long)]
    val: PathBuf,
    #[command(flatten)]
    grid: GridArgs,
}

#[derive(Args)]
struct IntraAccArgs {
    /// Unadapted visual cache.
    #[arg(long)]
    cache: PathBuf,
    #[arg(long)]
    bundle: PathBuf,
    /// Score with adapted keys and queries instead of raw affinities.
    #[arg(long)]
    adapter: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_BETA)]
    beta: f64,
}

#[derive(Args)]
struct AnalyzeFlipsArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long)]
    bundle: PathBuf,
    #[command(flatten)]
    alpha: AlphaArgs,
}

#[derive(Args)]
struct TableArgs {
    /// Eval report JSON files.
    #[arg(long, num_args = 1.., required = true)]
    reports: Vec<PathBuf>,
    /// CSV output path; the CSV is embedded in the JSON result when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Config problems are reported as usage errors; everything else maps by family.
fn exit_code(err: &Error) -> u8 {
    match err {
        Error::InvalidConfig(_) => 2,
        other => other.exit_code() as u8,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(a) => commands::synth(a),
        Command::BuildTextCache(a) => commands::build_text_cache(a),
        Command::BuildCache(a) => commands::build_cache(a),
        Command::TrainVisual(a) => commands::train_visual(a),
        Command::TrainText(a) => commands::train_text(a),
        Command::Eval(a) => commands::eval(a),
        Command::GridAlpha(a) => commands::grid_alpha(a),
        Command::IntraAcc(a) => commands::intra_acc(a),
        Command::AnalyzeFlips(a) => commands::analyze_flips(a),
        Command::Table(a) => commands::table(a),
    };
    match result {
        Ok(value) => {
            let text = serde_json::to_string_pretty(&value).expect("JSON values always serialize");
            match writeln!(std::io::stdout().lock(), "{text}") {
                Ok(()) => ExitCode::SUCCESS,
                // a closed reader (e.g. `| head`) is not a failure of the command
                Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => ExitCode::SUCCESS,
                Err(e) => {
                    eprintln!("error [Io]: writing result: {e}");
                    ExitCode::from(3)
                }
            }
        }
        Err(err) => {
            eprintln!("error [{}]: {err}", err.kind());
            ExitCode::from(exit_code(&err))
        }
    }
}
