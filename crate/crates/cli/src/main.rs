//! `roughseg` command-line front end.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};

use roughseg::confidence::Policy;
use roughseg::trainer::Optimizer;

#[derive(Parser)]
#[command(name = "roughseg", version, about = "Rough-set segmentation from inconsistent labels")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic noisy-label dataset.
    Synth(SynthArgs),
    /// Train a model with variance-based label correction.
    Train(TrainArgs),
    /// Monte-Carlo inference: probability, lower, upper and boundary maps.
    Infer(InferArgs),
    /// Score predictions against labels (and optional ground truth).
    Eval(EvalArgs),
    /// Grade defects by discrimination confidence.
    Grade(GradeArgs),
}

#[derive(Args)]
struct Common {
    /// Flat JSON config; flags override its keys.
    #[arg(short, long, global = true)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    count: Option<usize>,
    #[arg(long)]
    size: Option<usize>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    /// Dataset directory with images/ and labels/.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long = "T-train")]
    t_train: Option<usize>,
    #[arg(long)]
    warmup_epochs: Option<usize>,
    #[arg(long, value_parser = parse_optimizer)]
    optimizer: Option<Optimizer>,
    #[arg(long)]
    base_channels: Option<usize>,
    #[arg(long)]
    depth: Option<usize>,
    /// `default`, `all`, `none`, or a comma list such as `enc3,enc4,center`.
    #[arg(long)]
    placements: Option<String>,
    #[arg(long)]
    keep_prob: Option<f64>,
    #[arg(long)]
    block_size: Option<usize>,
    /// Train the deterministic baseline on crisp labels.
    #[arg(long)]
    no_psbm: bool,
}

#[derive(Args)]
struct InferArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    images: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Stochastic passes per image (default 16).
    #[arg(long = "T")]
    t: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Also write timing.json.
    #[arg(long)]
    timing: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    /// Output directory of `infer`.
    #[arg(long)]
    pred: Option<PathBuf>,
    #[arg(long)]
    labels: Option<PathBuf>,
    /// Directory with core/ and halo/ masks.
    #[arg(long)]
    truth: Option<PathBuf>,
    /// Report file.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GradeArgs {
    #[command(flatten)]
    common: Common,
    /// Directory of probability PNGs.
    #[arg(long)]
    prob: Option<PathBuf>,
    /// JSON list of {class, length_mm, width_mm}; defaults to the built-in table.
    #[arg(long)]
    standards: Option<PathBuf>,
    /// Millimetres per pixel.
    #[arg(long)]
    pixel_equiv: Option<f64>,
    #[arg(long, value_parser = parse_policy)]
    policy: Option<Policy>,
    /// Grayscale images to draw the overlays on.
    #[arg(long)]
    images: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_optimizer(s: &str) -> Result<Optimizer, String> {
    serde_json::from_value(serde_json::Value::String(s.into())).map_err(|_| format!("unknown optimizer `{s}` (sgd, adam)"))
}

fn parse_policy(s: &str) -> Result<Policy, String> {
    serde_json::from_value(serde_json::Value::String(s.into())).map_err(|_| format!("unknown policy `{s}` (or, and)"))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(a) => {
            let opts: commands::SynthOpts = config::resolve(
                a.common.config.as_deref(),
                flags! {
                    "out_dir" => a.out,
                    "seed" => a.seed,
                    "count" => a.count,
                    "size" => a.size,
                },
            )?;
            commands::synth(&opts)?;
        }
        Command::Train(a) => {
            let opts: commands::TrainOpts = config::resolve(
                a.common.config.as_deref(),
                flags! {
                    "data_dir" => a.data,
                    "out_dir" => a.out,
                    "seed" => a.seed,
                    "epochs" => a.epochs,
                    "batch_size" => a.batch_size,
                    "learning_rate" => a.learning_rate,
                    "T_train" => a.t_train,
                    "warmup_epochs" => a.warmup_epochs,
                    "optimizer" => a.optimizer,
                    "base_channels" => a.base_channels,
                    "depth" => a.depth,
                    "placements" => a.placements,
                    "keep_prob" => a.keep_prob,
                    "block_size" => a.block_size,
                    "no_psbm" => a.no_psbm.then_some(true),
                },
            )?;
            commands::train(&opts)?;
        }
        Command::Infer(a) => {
            let opts: commands::InferOpts = config::resolve(
                a.common.config.as_deref(),
                flags! {
                    "checkpoint" => a.checkpoint,
                    "image_dir" => a.images,
                    "out_dir" => a.out,
                    "T" => a.t,
                    "seed" => a.seed,
                    "timing" => a.timing.then_some(true),
                },
            )?;
            commands::infer(&opts)?;
        }
        Command::Eval(a) => {
            let opts: commands::EvalOpts = config::resolve(
                a.common.config.as_deref(),
                flags! {
                    "pred_dir" => a.pred,
                    "label_dir" => a.labels,
                    "truth_dir" => a.truth,
                    "out" => a.out,
                },
            )?;
            commands::eval(&opts)?;
        }
        Command::Grade(a) => {
            let opts: commands::GradeOpts = config::resolve(
                a.common.config.as_deref(),
                flags! {
                    "prob_dir" => a.prob,
                    "standards" => a.standards,
                    "pixel_equiv" => a.pixel_equiv,
                    "policy" => a.policy,
                    "image_dir" => a.images,
                    "out_dir" => a.out,
                },
            )?;
            commands::grade(&opts)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
