//! Command-line entry point: training, evaluation, inference, gradient
//! checks, synthetic data and benchmarks.

pub mod commands;
pub mod config;
pub mod error;
pub mod manifest;
pub mod render;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub use config::{ModelSpec, RunConfig};
pub use error::{CliError, CliResult};
pub use manifest::RunManifest;

#[derive(Debug, Parser)]
#[command(name = "aggpose", version, about = "Top-down pose estimation with deep-aggregation transformers")]
pub struct Cli {
    /// Worker threads; defaults to all cores (or RAYON_NUM_THREADS).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Where to write the run manifest (train defaults to OUT/run.json).
    #[arg(long, global = true)]
    pub manifest: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a network on a COCO-format dataset directory.
    Train(TrainArgs),
    /// Score a checkpoint or a results file against annotations.
    Eval(EvalArgs),
    /// Predict keypoints in one image.
    Infer(InferArgs),
    /// Compare analytic and finite-difference gradients.
    Gradcheck(GradcheckArgs),
    /// Write a synthetic dataset.
    Synth(SynthArgs),
    /// Measure forward throughput and per-block time.
    Bench(BenchArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Directory with annotations.json and images/.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides train.seed; also seeds parameter initialization.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Continue from a checkpoint carrying optimizer state.
    #[arg(long, conflicts_with = "init")]
    pub resume: Option<PathBuf>,
    /// Initialize matching parameters from a checkpoint.
    #[arg(long)]
    pub init: Option<PathBuf>,
    /// Restrict --init to names with these prefixes.
    #[arg(long = "init-prefix", requires = "init")]
    pub init_prefix: Vec<String>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub annotations: PathBuf,
    /// Image directory; defaults to the directory holding the annotations.
    #[arg(long)]
    pub images: Option<PathBuf>,
    #[arg(long, required_unless_present = "results", conflicts_with = "results")]
    pub checkpoint: Option<PathBuf>,
    /// Person boxes (COCO detection results); ground-truth boxes by default.
    #[arg(long, requires = "checkpoint")]
    pub boxes: Option<PathBuf>,
    /// Score an existing keypoint results file instead of running a network.
    #[arg(long)]
    pub results: Option<PathBuf>,
    /// `coco`, `infant` or a schema JSON path; inferred from the checkpoint by default.
    #[arg(long)]
    pub schema: Option<String>,
    /// Box enlargement; defaults to the value the checkpoint was trained with.
    #[arg(long)]
    pub padding: Option<f64>,
    /// Metrics report (JSON).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Write predictions as a COCO results file.
    #[arg(long)]
    pub predictions: Option<PathBuf>,
    /// Exit with status 1 when AP falls below this value.
    #[arg(long)]
    pub min_ap: Option<f64>,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub image: PathBuf,
    /// Keypoint file (JSON).
    #[arg(long)]
    pub out: PathBuf,
    /// Person box `x,y,w,h`; the whole image by default.
    #[arg(long, value_parser = parse_bbox)]
    pub bbox: Option<[f64; 4]>,
    /// Also write a heatmap overlay next to the keypoint file.
    #[arg(long)]
    pub overlay: bool,
    #[arg(long)]
    pub schema: Option<String>,
    #[arg(long)]
    pub padding: Option<f64>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// A block name or `all`.
    #[arg(default_value = "all")]
    pub scope: String,
    /// Also write the report as JSON.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 16)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 48)]
    pub width: usize,
    #[arg(long, default_value_t = 64)]
    pub height: usize,
    #[arg(long, default_value = "infant")]
    pub schema: String,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// Run file naming the network; `--model` takes precedence.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Network preset (aggpose-l, aggpose-s, aggpose-t, micro).
    #[arg(long)]
    pub model: Option<String>,
    #[arg(long, default_value_t = 1)]
    pub batch: usize,
    #[arg(long, default_value_t = 3)]
    pub iters: usize,
    #[arg(long, default_value_t = 1)]
    pub warmup: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Also write the report as JSON.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn parse_bbox(s: &str) -> Result<[f64; 4], String> {
    let v: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|e| format!("{p:?}: {e}")))
        .collect::<Result<_, _>>()?;
    match v[..] {
        [x, y, w, h] if w > 0.0 && h > 0.0 && v.iter().all(|c| c.is_finite()) => Ok([x, y, w, h]),
        _ => Err(format!("expected x,y,w,h with positive size, got {s:?}")),
    }
}

/// Run a parsed command line and return the process exit status.
pub fn run(cli: Cli) -> u8 {
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            log::warn!("thread pool already configured: {e}");
        }
    }
    let result = match &cli.command {
        Command::Train(a) => commands::train(a, cli.manifest.as_deref()),
        Command::Eval(a) => commands::eval(a, cli.manifest.as_deref()),
        Command::Infer(a) => commands::infer(a, cli.manifest.as_deref()),
        Command::Gradcheck(a) => commands::gradcheck(a, cli.manifest.as_deref()),
        Command::Synth(a) => commands::synth(a, cli.manifest.as_deref()),
        Command::Bench(a) => commands::bench(a, cli.manifest.as_deref()),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
