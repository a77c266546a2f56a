//! `s3dcnn`: voxelize meshes, train sparse 3D CNNs, embed, evaluate retrieval.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical divergence.

mod commands;
mod config;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::{Config, List};
use s3dcnn::dataset::Split;
use s3dcnn::retrieval::RankBy;

/// Bad arguments or configuration (exit code 1).
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

#[derive(Parser, Debug)]
#[command(name = "s3dcnn", version, about = "Sparse 3D convolutional networks for shape classification and retrieval")]
#[command(after_help = "Values resolve as: command-line flag, then --config entry, then the built-in default.\n\
Exit codes: 0 ok, 1 usage, 2 data error, 3 numerical divergence.")]
pub struct Cli {
    /// `key = value` file supplying defaults for any long flag (key = flag name without dashes)
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    /// Worker threads for voxelization, batching and evaluation [default: all cores]
    #[arg(long, global = true, value_name = "N")]
    pub threads: Option<usize>,

    /// Only print warnings and errors
    #[arg(long, short, global = true)]
    pub quiet: bool,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Voxelize an OFF mesh or a directory of meshes into .svox grids
    Voxelize(VoxelizeArgs),
    /// Train a classifier or a triplet-loss embedding network
    Train(TrainArgs),
    /// Write one embedding row per sample of a split
    Embed(EmbedArgs),
    /// Retrieval metrics (mAP, PR curve, AUC) over an embeddings CSV
    Evaluate(EvaluateArgs),
    /// Train and evaluate once per input resolution; writes resolution,map rows
    Sweep(SweepArgs),
    /// Time forward passes and report rule-book statistics
    Bench(BenchArgs),
}

#[derive(Args, Debug)]
pub struct VoxelizeArgs {
    /// OFF file, or directory searched recursively for *.off
    #[arg(long)]
    pub input: PathBuf,
    /// Render size of the mesh's bounding cube in voxels [default: 40]
    #[arg(long, short = 'r', value_name = "R")]
    pub resolution: Option<usize>,
    /// Side of the cubic field the render block is centered in [default: 126]
    #[arg(long)]
    pub pad: Option<usize>,
    /// Output .svox file, or output directory when --input is a directory
    #[arg(long)]
    pub output: PathBuf,
    /// Store site coordinates only, without the constant feature channel
    #[arg(long)]
    pub geometry_only: bool,
}

/// Architecture and rendering shared by the training-type commands.
#[derive(Args, Debug, Clone)]
pub struct ModelArgs {
    /// Render size of each mesh's bounding cube in voxels [default: 40]
    #[arg(long, short = 'r', value_name = "R")]
    pub resolution: Option<usize>,
    /// Input field side; the network is built for this size [default: 126]
    #[arg(long)]
    pub pad: Option<usize>,
    /// Output widths of the conv blocks, comma separated [default: 32,64,96,128,160,192]
    #[arg(long, value_name = "W1,W2,..")]
    pub widths: Option<List<usize>>,
}

#[derive(Args, Debug, Clone)]
pub struct OptimArgs {
    /// Total training epochs [default: 200]
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Initial learning rate [default: 0.002]
    #[arg(long)]
    pub lr: Option<f64>,
    /// SGD momentum [default: 0.99]
    #[arg(long)]
    pub momentum: Option<f64>,
    /// Per-epoch learning-rate multiplier [default: 0.985]
    #[arg(long = "lr-decay")]
    pub lr_decay: Option<f64>,
    /// Triplet ranking margin on cosine distance [default: 0.2]
    #[arg(long)]
    pub margin: Option<f64>,
    /// Samples per batch; triplet batches hold batch/3 triplets [default: 45]
    #[arg(long)]
    pub batch: Option<usize>,
    /// Seed for initialization, shuffling, augmentation and splits [default: 0]
    #[arg(long)]
    pub seed: Option<u64>,
    /// Fraction of each training class held out for validation [default: 0.1]
    #[arg(long = "val-fraction")]
    pub val_fraction: Option<f64>,
    /// Validate every N epochs and after the last one [default: 5]
    #[arg(long = "val-every")]
    pub val_every: Option<usize>,
    /// Random rotation about z plus integer jitter up to N voxels per axis [default: off]
    #[arg(long, value_name = "N")]
    pub augment: Option<i32>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// classify (softmax head) or triplet (cosine ranking loss) [default: classify]
    #[arg(long)]
    pub task: Option<Task>,
    /// Corpus root (<class>/{train,test}/*.off) or a path,label,split manifest CSV
    #[arg(long)]
    pub data: PathBuf,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub optim: OptimArgs,
    /// Checkpoint path; the best validation checkpoint is written next to it as <name>.best.<ext>
    #[arg(long)]
    pub out: PathBuf,
    /// Newline-delimited JSON metrics log [default: <out>.log.ndjson]
    #[arg(long)]
    pub log: Option<PathBuf>,
    /// Continue from this checkpoint (same architecture and task)
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EmbedArgs {
    /// Trained checkpoint (.ckpt)
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Corpus root or manifest CSV
    #[arg(long)]
    pub data: PathBuf,
    /// train or test [default: test]
    #[arg(long)]
    pub split: Option<Split>,
    /// Render size in voxels [default: 40]
    #[arg(long, short = 'r', value_name = "R")]
    pub resolution: Option<usize>,
    /// Expected field side; must match the checkpoint [default: from checkpoint]
    #[arg(long)]
    pub pad: Option<usize>,
    /// Expected conv widths; must match the checkpoint [default: from checkpoint]
    #[arg(long, value_name = "W1,W2,..")]
    pub widths: Option<List<usize>>,
    /// Samples per forward pass [default: 45]
    #[arg(long)]
    pub batch: Option<usize>,
    /// Output CSV: id,label,v0..v{d-1}
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Clone)]
pub struct QueryArgs {
    /// Queries drawn from each class; smaller classes are used whole [default: 20]
    #[arg(long = "queries-per-class")]
    pub queries_per_class: Option<usize>,
    /// Ranking distance: cosine or l2 [default: cosine]
    #[arg(long = "rank-by")]
    pub rank_by: Option<RankBy>,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    /// Embeddings CSV as written by `embed`
    #[arg(long)]
    pub embeddings: PathBuf,
    #[command(flatten)]
    pub query: QueryArgs,
    /// Seed for query selection [default: 0]
    #[arg(long)]
    pub seed: Option<u64>,
    /// Metrics JSON [default: print to stdout]
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// 11-point interpolated precision-recall CSV
    #[arg(long = "pr-curve")]
    pub pr_curve: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct SweepArgs {
    /// Render sizes to try, comma separated
    #[arg(long)]
    pub resolutions: Option<List<usize>>,
    /// classify or triplet [default: triplet]
    #[arg(long)]
    pub task: Option<Task>,
    /// Corpus root or manifest CSV
    #[arg(long)]
    pub data: PathBuf,
    /// Input field side [default: 126]
    #[arg(long)]
    pub pad: Option<usize>,
    /// Conv block widths [default: 32,64,96,128,160,192]
    #[arg(long, value_name = "W1,W2,..")]
    pub widths: Option<List<usize>>,
    #[command(flatten)]
    pub optim: OptimArgs,
    #[command(flatten)]
    pub query: QueryArgs,
    /// Result CSV (resolution,map); existing rows are kept and skipped
    #[arg(long)]
    pub out: PathBuf,
    /// Directory for per-resolution checkpoints and logs [default: <out>.runs]
    #[arg(long = "work-dir")]
    pub work_dir: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    /// Checkpoint to time [default: freshly initialized default network]
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// A single OFF file or a corpus root / manifest CSV
    #[arg(long)]
    pub data: PathBuf,
    /// Split used when --data is a corpus [default: test]
    #[arg(long)]
    pub split: Option<Split>,
    /// Render size in voxels [default: 40]
    #[arg(long, short = 'r', value_name = "R")]
    pub resolution: Option<usize>,
    /// Timed forward passes per sample [default: 5]
    #[arg(long)]
    pub repeat: Option<usize>,
    /// Samples taken from a corpus [default: 20]
    #[arg(long)]
    pub limit: Option<usize>,
    /// Seed of the fresh network when no checkpoint is given [default: 0]
    #[arg(long)]
    pub seed: Option<u64>,
    /// Also write the statistics as JSON
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Task {
    Classify,
    Triplet,
}

impl std::str::FromStr for Task {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "classify" | "classification" => Ok(Task::Classify),
            "triplet" => Ok(Task::Triplet),
            _ => Err(format!("unknown task `{s}` (classify|triplet)")),
        }
    }
}

/// Exit code for an error chain: the first library error decides.
fn exit_code(err: &anyhow::Error) -> u8 {
    fn library(e: &s3dcnn::Error) -> u8 {
        match e {
            s3dcnn::Error::InvalidArgument(_) => 1,
            s3dcnn::Error::Divergence(_) => 3,
            s3dcnn::Error::File { source, .. } => library(source),
            _ => 2,
        }
    }
    for cause in err.chain() {
        if cause.downcast_ref::<UsageError>().is_some() {
            return 1;
        }
        if let Some(e) = cause.downcast_ref::<s3dcnn::Error>() {
            return library(e);
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return 2;
        }
    }
    2
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let config = match &cli.config {
        Some(path) => Config::load(path)?,
        None => Config::default(),
    };
    let threads = config.pick_opt(cli.threads, "threads")?;
    if let Some(n) = threads {
        if n == 0 {
            return Err(UsageError("--threads must be at least 1".into()).into());
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    let result = match cli.command {
        Command::Voxelize(a) => commands::voxelize(a, &config),
        Command::Train(a) => commands::train(a, &config),
        Command::Embed(a) => commands::embed(a, &config),
        Command::Evaluate(a) => commands::evaluate(a, &config),
        Command::Sweep(a) => commands::sweep(a, &config),
        Command::Bench(a) => commands::bench(a, &config),
    };
    for key in config.unused() {
        log::warn!("config key `{key}` is not used by this command");
    }
    result
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let level = if cli.quiet { "warn" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
