//! `lenplan`: ingest prompt corpora, train and calibrate the length
//! predictor, and benchmark canvas-sizing strategies under the FLOP model.

mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

/// Seed used whenever none is given.
pub const DEFAULT_SEED: u64 = 42;

#[derive(Parser)]
#[command(name = "lenplan", version, about = "Response-length planning for diffusion LLM inference")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Validate a JSONL corpus and write it with response lengths filled in.
    Ingest(IngestArgs),
    /// Train the length predictor on the train split and report test metrics.
    Train(TrainArgs),
    /// Calibrate the safety margin on the validation split.
    Calibrate(CalibrateArgs),
    /// Simulate strategies over a dataset and write a cost report.
    Bench(BenchArgs),
    /// Generate a synthetic mixture corpus.
    Gen(GenArgs),
    /// Fit a quadratic to a `seq_len,flop` CSV.
    Fit(FitArgs),
    /// Predict response lengths for prompts.
    Predict(PredictArgs),
    /// Compare MeanDoubling and Predict-then-Diffuse on the bimodal mixture.
    Bimodal(BimodalArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum TokenizerArg {
    /// Keep response_length when present, otherwise count the response.
    Default,
    /// Require response_length on every record.
    Precomputed,
}

#[derive(Args, Serialize)]
pub struct IngestArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
    #[arg(long, value_enum, default_value = "default")]
    pub tokenizer: TokenizerArg,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum VariantArg {
    TextOnly,
    Engineered,
    /// Train both and print a comparison table.
    Both,
}

#[derive(Args, Serialize)]
pub struct SplitArgs {
    /// Seed for the train/test and fit/validation shuffles.
    #[arg(long, default_value_t = DEFAULT_SEED)]
    pub seed: u64,
    /// Share of records in the train split.
    #[arg(long, default_value_t = 0.8)]
    pub train_ratio: f64,
    /// Share of the train split used for fitting; the rest calibrates δ.
    #[arg(long, default_value_t = 0.8)]
    pub fit_ratio: f64,
}

#[derive(Args, Serialize)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Model path. With `--variant both`, `.text-only` and `.engineered` are
    /// inserted before the extension.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value = "text-only")]
    pub variant: VariantArg,
    #[command(flatten)]
    pub split: SplitArgs,
    #[arg(long, default_value_t = 200)]
    pub rounds: usize,
    #[arg(long, default_value_t = 6)]
    pub max_depth: usize,
    #[arg(long, default_value_t = 0.1)]
    pub learning_rate: f64,
    #[arg(long, default_value_t = 20)]
    pub min_samples_leaf: usize,
    #[arg(long, default_value_t = 4096)]
    pub hash_buckets: usize,
}

#[derive(Args, Serialize)]
pub struct CalibrateArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// The corpus the model was trained on.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 0.95)]
    pub p_safe: f64,
    /// Margin path; defaults to `<model stem>.margin.json`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum SplitChoice {
    /// The held-out test split recorded with the model.
    Test,
    /// Every record.
    All,
}

#[derive(Args, Serialize)]
pub struct ModelConfigArgs {
    /// JSON file with num_blocks, hidden_dim, mlp_width, diffusion_steps and
    /// max_response_len. Individual flags override it.
    #[arg(long, env = "LENPLAN_MODEL_CONFIG")]
    pub model_config: Option<PathBuf>,
    /// Transformer blocks N [default: 32]
    #[arg(long)]
    pub blocks: Option<u64>,
    /// Hidden dimension D [default: 4096]
    #[arg(long)]
    pub hidden: Option<u64>,
    /// MLP width F [default: 12288]
    #[arg(long)]
    pub mlp: Option<u64>,
    /// Denoising steps T [default: 128]
    #[arg(long)]
    pub steps: Option<u64>,
    /// Maximum response canvas L_max [default: 4096]
    #[arg(long)]
    pub lmax: Option<u32>,
}

#[derive(Args, Serialize)]
pub struct BenchArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Trained predictor; required for `ptd`.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Safety margin file; defaults to the model's sidecar.
    #[arg(long)]
    pub margin: Option<PathBuf>,
    /// Use this δ instead of a margin file.
    #[arg(long)]
    pub delta: Option<u32>,
    /// Report path; `.json` or `.csv` picks the format unless `--format` is given.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub format: Option<String>,
    /// Comma-separated subset of max, static, static:<n>, mean, ptd, oracle.
    #[arg(long, default_value = "max,static,mean,ptd,oracle")]
    pub strategies: String,
    /// Initial canvas for `static`.
    #[arg(long, default_value_t = 200)]
    pub static_initial: u32,
    /// Override the training-set mean used by `mean`.
    #[arg(long)]
    pub train_mean: Option<u32>,
    #[arg(long, value_enum, default_value = "test")]
    pub split: SplitChoice,
    /// Split seed; defaults to the one recorded with the model, else 42.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub train_ratio: Option<f64>,
    #[arg(long)]
    pub fit_ratio: Option<f64>,
    /// Count prompt tokens as part of every attempt's sequence length.
    #[arg(long)]
    pub include_prompt: bool,
    /// Write per-record attempt traces as JSONL.
    #[arg(long)]
    pub traces: Option<PathBuf>,
    /// Write per-strategy latency profiles as JSON.
    #[arg(long)]
    pub latency: Option<PathBuf>,
    /// Write a `seq_len,flop` CSV of single-inference cost.
    #[arg(long)]
    pub emit_cost_curve: Option<PathBuf>,
    #[arg(long, default_value_t = 64)]
    pub curve_step: u32,
    /// Worker threads for simulation.
    #[arg(long)]
    pub jobs: Option<usize>,
    #[command(flatten)]
    pub model_config: ModelConfigArgs,
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    /// 60% short (mean 50) and 40% long (mean 3000) responses.
    Bimodal,
    /// Heavy-tailed lengths with mean 96 and standard deviation 120.
    Skewed,
}

#[derive(Args, Serialize)]
pub struct GenArgs {
    #[arg(long, value_enum, conflicts_with = "component")]
    pub preset: Option<Preset>,
    /// `label:weight:family:mean:spread`, repeatable; family is constant,
    /// normal or lognormal.
    #[arg(long)]
    pub component: Vec<String>,
    #[arg(long, default_value_t = 10_000)]
    pub size: usize,
    #[arg(long, default_value_t = DEFAULT_SEED)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Serialize)]
pub struct FitArgs {
    #[arg(long)]
    pub input: PathBuf,
    /// Also write the fit as JSON.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Serialize)]
pub struct PredictArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// JSONL with a `prompt` field, or plain text with one prompt per line.
    /// Reads stdin when omitted.
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// CSV destination; stdout when omitted.
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Args, Serialize)]
pub struct BimodalArgs {
    #[arg(long, default_value_t = 10_000)]
    pub size: usize,
    #[arg(long, default_value_t = DEFAULT_SEED)]
    pub seed: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub model_config: ModelConfigArgs,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Ingest(a) => commands::ingest(a),
        Command::Train(a) => commands::train(a),
        Command::Calibrate(a) => commands::calibrate(a),
        Command::Bench(a) => commands::bench(a),
        Command::Gen(a) => commands::gen(a),
        Command::Fit(a) => commands::fit(a),
        Command::Predict(a) => commands::predict(a),
        Command::Bimodal(a) => commands::bimodal(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
