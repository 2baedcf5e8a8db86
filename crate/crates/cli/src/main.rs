//! `stereosparse`: synthetic data, dictionary learning, sparse encoding,
//! detector training, evaluation, the experiment matrix and first-layer
//! analysis.
//!
//! Every subcommand accepts `--config file.json` whose keys are the long
//! flag names with `_` for `-`; flags given on the command line win. The
//! fully resolved configuration is written as `config.resolved.json` beside
//! the outputs and can be passed back through `--config`.
//!
//! Exit status: 0 on success, 2 on a usage error, 1 on any other failure.

mod commands;
mod config;

use std::io::Write as _;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, CommandFactory, Parser, Subcommand};
use serde::Serialize;
use stereosparse::lca::Competition;
use stereosparse::VariantKind;

use config::{resolve, Dims3, UsageError};

#[derive(Parser, Debug)]
#[command(name = "stereosparse", version, about = "Sparse-coding stereo video toolkit")]
struct Cli {
    /// JSON file of flat settings; command-line flags override it.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Write synthetic stereo scenes as STEN files plus a manifest.
    Synth(SynthFlags),
    /// Learn a convolutional dictionary by sparse coding.
    TrainDict(TrainDictFlags),
    /// Sparse-code one input tensor against a dictionary.
    Encode(EncodeFlags),
    /// Train a window detector.
    TrainNet(TrainNetFlags),
    /// Score a trained detector (prints the PR AUC).
    Eval(EvalFlags),
    /// Run the variants x depths x sizes x seeds comparison.
    RunMatrix(MatrixFlags),
    /// Depth selectivity and activation overlays of a first layer.
    Analyze(AnalyzeFlags),
}

fn competition(s: &str) -> Result<Competition, String> {
    serde_json::from_value(serde_json::Value::String(s.into())).map_err(|_| format!("expected residual or gram, got {s:?}"))
}

#[derive(Args, Debug, Serialize)]
struct SynthFlags {
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Total number of examples.
    #[arg(long)]
    n: Option<usize>,
    /// How many of them form the test split (default n/5).
    #[arg(long)]
    n_test: Option<usize>,
    /// [default: 1]
    #[arg(long)]
    seed: Option<u64>,
    /// Draw object disparities from this set, e.g. 1,6.
    #[arg(long, value_delimiter = ',')]
    disparity_levels: Option<Vec<u32>>,
}

#[derive(Args, Debug, Serialize)]
struct TrainDictFlags {
    /// Manifest (JSON lines).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Manifest split to learn from, or "all".
    #[arg(long)]
    split: Option<String>,
    /// Dictionary file (STEN); the history CSV is written alongside.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    features: Option<usize>,
    /// Kernel extent TxHxW.
    #[arg(long)]
    kernel: Option<Dims3>,
    /// Stride TxHxW.
    #[arg(long)]
    stride: Option<Dims3>,
    #[arg(long)]
    lambda: Option<f32>,
    /// LCA iteration cap.
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    dt: Option<f32>,
    #[arg(long)]
    stop_tol: Option<f64>,
    #[arg(long, value_parser = competition)]
    competition: Option<Competition>,
    #[arg(long)]
    lr: Option<f32>,
    #[arg(long)]
    batches: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// [default: 1]
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug, Serialize)]
struct EncodeFlags {
    /// Dictionary (STEN).
    #[arg(long)]
    dict: Option<PathBuf>,
    /// Input tensor (STEN), [t,h,w,c] or [b,t,h,w,c].
    #[arg(long)]
    input: Option<PathBuf>,
    /// Activations (STEN); the energy trace CSV is written alongside.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Dictionary stride TxHxW.
    #[arg(long)]
    stride: Option<Dims3>,
    #[arg(long)]
    lambda: Option<f32>,
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    dt: Option<f32>,
    #[arg(long)]
    stop_tol: Option<f64>,
    #[arg(long, value_parser = competition)]
    competition: Option<Competition>,
    /// Pad the input so the stride tiles it (true/false).
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pad: Option<bool>,
    /// [default: 1]
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug, Serialize)]
struct NetFlags {
    /// First-layer features (default: from the dictionary, else 64).
    #[arg(long)]
    features: Option<usize>,
    /// First-layer kernel TxHxW (default: from the dictionary, else 3x8x8).
    #[arg(long)]
    kernel: Option<Dims3>,
    /// First-layer stride TxHxW.
    #[arg(long)]
    stride: Option<Dims3>,
    #[arg(long)]
    mid_features: Option<usize>,
    #[arg(long)]
    lambda: Option<f32>,
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    dt: Option<f32>,
    #[arg(long)]
    stop_tol: Option<f64>,
    #[arg(long, value_parser = competition)]
    competition: Option<Competition>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f32>,
}

#[derive(Args, Debug, Serialize)]
struct TrainNetFlags {
    /// sparse_unsup, conv_unsup, conv_sup, conv_finetune or conv_rand.
    #[arg(long)]
    variant: Option<VariantKind>,
    /// Layer count, 2 to 4.
    #[arg(long)]
    depth: Option<usize>,
    /// Dictionary (STEN); required by sparse_unsup, conv_unsup, conv_finetune.
    #[arg(long)]
    dict: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    split: Option<String>,
    /// Training subset size (default: the whole split).
    #[arg(long)]
    n_train: Option<usize>,
    /// [default: 1]
    #[arg(long)]
    seed: Option<u64>,
    /// Model file; the loss log is written alongside.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    #[serde(flatten)]
    net: NetFlags,
}

#[derive(Args, Debug, Serialize)]
struct EvalFlags {
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    split: Option<String>,
    /// Directory for metrics.json and scores.csv.
    #[arg(long)]
    out: Option<PathBuf>,
    /// [default: 1]
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug, Serialize)]
struct MatrixFlags {
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    train_split: Option<String>,
    #[arg(long)]
    test_split: Option<String>,
    #[arg(long)]
    dict: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    variants: Option<Vec<VariantKind>>,
    #[arg(long, value_delimiter = ',')]
    depths: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    n_train: Option<Vec<usize>>,
    /// [default: 1,2,3,4,5,6]
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Reuse finished cells from <out>/cache (true/false).
    #[arg(long)]
    cache: Option<bool>,
    #[command(flatten)]
    #[serde(flatten)]
    net: NetFlags,
}

#[derive(Args, Debug, Serialize)]
struct AnalyzeFlags {
    #[arg(long)]
    model: Option<PathBuf>,
    /// Comparison model, thresholded to the first model's sparsity.
    #[arg(long)]
    control: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Benchmark scenes.
    #[arg(long)]
    n: Option<usize>,
    /// [default: 1]
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_delimiter = ',')]
    disparity_levels: Option<Vec<u32>>,
    /// Overlays per model.
    #[arg(long)]
    overlays: Option<usize>,
}

fn dispatch(cli: &Cli) -> anyhow::Result<()> {
    let c = cli.config.as_deref();
    match &cli.command {
        Cmd::Synth(f) => commands::synth(resolve(c, f)?),
        Cmd::TrainDict(f) => commands::train_dict(resolve(c, f)?),
        Cmd::Encode(f) => commands::encode(resolve(c, f)?),
        Cmd::TrainNet(f) => commands::train_net(resolve(c, f)?),
        Cmd::Eval(f) => commands::evaluate(resolve(c, f)?),
        Cmd::RunMatrix(f) => commands::run_matrix(resolve(c, f)?),
        Cmd::Analyze(f) => commands::analyze(resolve(c, f)?),
    }
}

fn subcommand_name(cmd: &Cmd) -> &'static str {
    match cmd {
        Cmd::Synth(_) => "synth",
        Cmd::TrainDict(_) => "train-dict",
        Cmd::Encode(_) => "encode",
        Cmd::TrainNet(_) => "train-net",
        Cmd::Eval(_) => "eval",
        Cmd::RunMatrix(_) => "run-matrix",
        Cmd::Analyze(_) => "analyze",
    }
}

fn is_usage(e: &anyhow::Error) -> bool {
    e.chain().any(|c| {
        c.is::<UsageError>() || matches!(c.downcast_ref::<stereosparse::Error>(), Some(stereosparse::Error::Config(_)))
    })
}

fn init_logging() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format(|buf, rec| writeln!(buf, "{} {} {}", rec.level(), buf.timestamp_millis(), rec.args()))
        .target(env_logger::Target::Stderr)
        .init();
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    init_logging();
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if is_usage(&e) => {
            let mut cmd = Cli::command();
            let name = subcommand_name(&cli.command);
            let sub = cmd.find_subcommand_mut(name).expect("subcommand exists");
            let usage = sub.render_usage();
            eprintln!("error: {e:#}\n\n{usage}\n\nFor more information, try 'stereosparse {name} --help'.");
            ExitCode::from(2)
        }
        Err(e) => {
            log::error!("{e:#}");
            ExitCode::FAILURE
        }
    }
}
