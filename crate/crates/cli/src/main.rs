//! Pipeline driver: one subcommand per stage, sharing a run manifest.

mod commands;
mod failure;
mod manifest;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use failure::Failure;

#[derive(Debug, Parser)]
#[command(name = "landseg", version, about = "Land-cover segmentation pipeline")]
struct Cli {
    /// Worker threads; 1 gives bit-reproducible runs.
    #[arg(long, global = true, env = "LANDSEG_THREADS", default_value_t = 1)]
    threads: usize,
    /// Master seed; overrides any seed in a config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Directory holding the run manifest.
    #[arg(long, global = true, default_value = ".")]
    run_dir: PathBuf,
    /// `six`, `seven` or a legend JSON file.
    #[arg(long, global = true, default_value = "six")]
    legend: String,
    /// Log progress to stderr.
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic scene.
    Synth(SynthArgs),
    /// Histogram match, cloud mask, derive slope and stack.
    Preprocess(PreprocessArgs),
    /// Plan, extract and split training tiles.
    Tile(TileArgs),
    /// Train a CART, random forest or SVM pixel classifier.
    TrainPixel(TrainPixelArgs),
    /// Train a miniature segmentation network on a tile set.
    TrainNet(TrainNetArgs),
    /// Classify a stack with a pixel model or a network.
    Predict(PredictArgs),
    /// Average probability maps.
    Ensemble(EnsembleArgs),
    /// Confusion matrix and accuracy report.
    Evaluate(EvaluateArgs),
    /// Experiment protocols.
    #[command(subcommand)]
    Experiment(ExperimentCommand),
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "scene")]
    name: String,
}

#[derive(Debug, Args)]
struct PreprocessArgs {
    /// Five-band spectral raster.
    #[arg(long = "in")]
    input: PathBuf,
    /// Cloud label raster, 1 for cloud.
    #[arg(long)]
    cloud: Option<PathBuf>,
    #[arg(long)]
    reference: PathBuf,
    #[arg(long)]
    dem: PathBuf,
    #[arg(long, default_value_t = 5.0)]
    cell_size: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct TileArgs {
    #[arg(long)]
    stack: PathBuf,
    #[arg(long)]
    labels: PathBuf,
    #[arg(long, default_value_t = 256)]
    patch: usize,
    #[arg(long, default_value_t = 128)]
    stride: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct TrainPixelArgs {
    #[arg(long, value_parser = ["cart", "rf", "svm"])]
    algo: String,
    #[arg(long)]
    stack: PathBuf,
    #[arg(long)]
    labels: PathBuf,
    /// Training pixels drawn per class.
    #[arg(long, default_value_t = landseg::sampling::DEFAULT_SAMPLES_PER_CLASS)]
    samples: usize,
    /// Algorithm parameters as JSON; missing fields keep their defaults.
    #[arg(long)]
    params: Option<PathBuf>,
    /// Comma-separated band names to use; all bands by default.
    #[arg(long, value_delimiter = ',')]
    bands: Option<Vec<String>>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct TrainNetArgs {
    #[arg(long)]
    arch: landseg::neural::Arch,
    /// Directory written by `tile`.
    #[arg(long)]
    tiles: PathBuf,
    /// Training config JSON; missing fields keep the architecture defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long, default_value_t = landseg::neural::DEFAULT_WIDTH)]
    width: usize,
    /// Weights stem; writes `<out>.json`, `<out>.bin` and `<out>_loss.csv`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct PredictArgs {
    /// Pixel model JSON or network weights stem.
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    stack: PathBuf,
    /// Tile plan JSON for networks; half-patch stride by default.
    #[arg(long)]
    plan: Option<PathBuf>,
    /// Output stem; writes `<out>_labels` and `<out>_probs`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct EnsembleArgs {
    #[arg(long, num_args = 1.., required = true)]
    probs: Vec<PathBuf>,
    /// Output stem; writes `<out>_labels` and `<out>_probs`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    #[arg(long)]
    pred: PathBuf,
    /// Label raster stem or a `row,col,class_id` CSV.
    #[arg(long)]
    truth: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Also write the confusion matrix CSV.
    #[arg(long)]
    matrix: Option<PathBuf>,
    #[arg(long, default_value = "model")]
    model_id: String,
    #[arg(long, default_value = "dataset")]
    dataset_id: String,
}

#[derive(Debug, Subcommand)]
enum ExperimentCommand {
    /// 5-band versus 7-band grid for CART, random forest and SVM.
    Table2(Table2Args),
}

#[derive(Debug, Args)]
struct Table2Args {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value = "table2_report.json")]
    out: PathBuf,
}

fn main() {
    let cli = Cli::parse();
    let level = if cli.verbose { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let code = match run(cli) {
        Ok(()) => 0,
        Err(f) => {
            eprintln!("{f}");
            f.exit_code()
        }
    };
    std::process::exit(code);
}

fn run(cli: Cli) -> Result<(), Failure> {
    if cli.threads == 0 {
        return Err(Failure::validation("--threads must be at least 1"));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads)
        .build_global()
        .map_err(|e| Failure::runtime(e.to_string()))?;
    let mut ctx = commands::Context::open(cli.run_dir, &cli.legend, cli.seed)?;
    match cli.command {
        Command::Synth(a) => commands::synth(&mut ctx, a),
        Command::Preprocess(a) => commands::preprocess(&mut ctx, a),
        Command::Tile(a) => commands::tile(&mut ctx, a),
        Command::TrainPixel(a) => commands::train_pixel(&mut ctx, a),
        Command::TrainNet(a) => commands::train_net(&mut ctx, a),
        Command::Predict(a) => commands::predict(&mut ctx, a),
        Command::Ensemble(a) => commands::ensemble(&mut ctx, a),
        Command::Evaluate(a) => commands::evaluate(&mut ctx, a),
        Command::Experiment(ExperimentCommand::Table2(a)) => commands::table2(&mut ctx, a),
    }
}
