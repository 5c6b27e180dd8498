//! `icbir` command-line front end.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "icbir", version, about = "Slice-embedding retrieval and detection for 3D volumes")]
struct Cli {
    /// Worker threads (results do not depend on this).
    #[arg(long, global = true, env = "ICBIR_THREADS")]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a labeled phantom dataset and its manifest.
    GenSynthetic(GenArgs),
    /// Train the VAE and prototypes on the train split of a manifest.
    Train(TrainArgs),
    /// Encode a gallery into an index file.
    Index(IndexArgs),
    /// Rank gallery volumes by similarity to a query volume.
    Query(QueryArgs),
    /// Per-orientation block voting and the final label of one volume.
    Detect(DetectArgs),
    /// Voxel probability maps and overlay images for one volume.
    Probmap(ProbmapArgs),
    /// Detection and retrieval metrics over a test split.
    Eval(EvalArgs),
}

#[derive(Args, Debug)]
struct GenArgs {
    #[arg(long)]
    out: PathBuf,
    /// Training volumes per class.
    #[arg(long, default_value_t = 100)]
    count: usize,
    /// Test volumes per class.
    #[arg(long, default_value_t = 0)]
    test_count: usize,
    #[arg(long, default_value_t = 2)]
    classes: usize,
    #[arg(long, default_value_t = 64)]
    side: usize,
    #[arg(long, default_value_t = 0.05)]
    noise: f64,
    #[arg(long, default_value_t = 2.0)]
    jitter: f64,
    #[arg(long, default_value_t = 1.5)]
    anomaly_scale: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Write the ground-truth masks next to the volumes.
    #[arg(long)]
    masks: bool,
    /// Overwrite a non-empty output directory.
    #[arg(long)]
    force: bool,
}

/// Block and voting knobs; unset values come from the checkpoint's run config.
#[derive(Args, Debug, Clone, Default)]
struct RuleArgs {
    /// Slices per block.
    #[arg(long)]
    block_n: Option<usize>,
    /// Stride between blocks.
    #[arg(long)]
    block_m: Option<usize>,
    /// Vote-fraction threshold, one value or one per class (comma separated).
    #[arg(long, value_delimiter = ',')]
    xi: Option<Vec<f64>>,
    /// Orientations that must agree.
    #[arg(long)]
    r: Option<usize>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "train")]
    split: String,
    /// JSON run config to start from; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    side: Option<usize>,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    latent: Option<usize>,
    #[arg(long)]
    beta: Option<f32>,
    #[arg(long)]
    gamma: Option<f32>,
    #[arg(long)]
    lr: Option<f32>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    temperature: Option<f32>,
    /// Class names in label order, comma separated.
    #[arg(long, value_delimiter = ',')]
    class_names: Option<Vec<String>>,
    #[arg(long)]
    max_batches: Option<usize>,
    #[command(flatten)]
    rules: RuleArgs,
}

#[derive(Args, Debug)]
struct IndexArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, default_value = "train")]
    split: String,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    rules: RuleArgs,
}

#[derive(Args, Debug)]
struct QueryArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    index: PathBuf,
    /// Query volume (SVOL).
    #[arg(long)]
    volume: PathBuf,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    json: bool,
}

#[derive(Args, Debug)]
struct DetectArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    volume: PathBuf,
    #[command(flatten)]
    rules: RuleArgs,
    #[arg(long)]
    json: bool,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum AggregateArg {
    Mean,
    Geometric,
}

#[derive(Args, Debug)]
struct ProbmapArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    volume: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// One-based class to highlight (default: the last class).
    #[arg(long)]
    class: Option<usize>,
    #[arg(long)]
    threshold: Option<f32>,
    #[arg(long, value_enum)]
    aggregate: Option<AggregateArg>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    index: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
    #[arg(long)]
    out: PathBuf,
    /// Also write a tab-separated summary.
    #[arg(long)]
    tsv: Option<PathBuf>,
    #[command(flatten)]
    rules: RuleArgs,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    if let Err(e) = commands::configure_threads(cli.threads) {
        return report(&e);
    }
    let result = match cli.command {
        Command::GenSynthetic(a) => commands::gen_synthetic(a),
        Command::Train(a) => commands::train(a),
        Command::Index(a) => commands::index(a),
        Command::Query(a) => commands::query(a),
        Command::Detect(a) => commands::detect(a),
        Command::Probmap(a) => commands::probmap(a),
        Command::Eval(a) => commands::eval(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => report(&e),
    }
}

fn report(e: &anyhow::Error) -> ExitCode {
    let code = e
        .chain()
        .find_map(|c| c.downcast_ref::<icbir_core::Error>())
        .map_or("E_CLI", |ie| ie.code());
    eprintln!("error[{code}]: {e:#}");
    ExitCode::FAILURE
}
