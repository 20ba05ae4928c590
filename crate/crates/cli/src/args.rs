// SPDX-License-Identifier: MIT OR Apache-2.0

//! Command-line grammar. Every argument struct is also serialized verbatim
//! into the run manifest as the configuration echo.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

/// Build identifier printed by `--version`.
pub const BUILD_ID: &str = concat!(env!("CARGO_PKG_VERSION"), " (", env!("CARGO_PKG_NAME"), ")");

#[derive(Debug, Parser)]
#[command(name = "headlens", version = BUILD_ID, about = "Locate and correct spurious attention heads in ViT image encoders")]
pub struct Cli {
    /// Worker threads for per-sample stages (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Command {
    /// Run the decomposed forward pass and write an activation store.
    Decompose(DecomposeArgs),
    /// Locate spurious and class heads.
    Locate(LocateArgs),
    /// Classify with or without head corrections.
    Correct(CorrectArgs),
    /// Score predictions.
    Evaluate(EvaluateArgs),
    /// Spatial heatmaps and caption token attributions.
    #[command(subcommand)]
    Interpret(InterpretCommand),
    /// Generate a planted-bias dataset.
    Synth(SynthArgs),
    /// Rerun the synthetic benchmark over a parameter grid.
    Sweep(SweepArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Decompose(_) => "decompose",
            Command::Locate(_) => "locate",
            Command::Correct(_) => "correct",
            Command::Evaluate(_) => "evaluate",
            Command::Interpret(InterpretCommand::Heatmap(_)) => "interpret heatmap",
            Command::Interpret(InterpretCommand::Shap(_)) => "interpret shap",
            Command::Synth(_) => "synth",
            Command::Sweep(_) => "sweep",
        }
    }
}

#[derive(Debug, Args, Serialize)]
pub struct DecomposeArgs {
    /// Weight directory (`weights.json` plus blobs).
    #[arg(long)]
    pub weights: PathBuf,
    /// Patch directory (`patches.json` plus blob).
    #[arg(long)]
    pub patches: PathBuf,
    /// Output store directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Also store per-token contributions.
    #[arg(long)]
    pub with_tokens: bool,
}

/// Options shared by commands that read a store.
#[derive(Debug, Args, Serialize)]
pub struct StoreArgs {
    /// Activation store directory.
    #[arg(long)]
    pub store: PathBuf,
    /// Fail on reconstruction violations instead of warning.
    #[arg(long)]
    pub strict: bool,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ConditioningArg {
    /// Predicted class against its runner-up.
    Predicted,
    /// True class against the most probable other class.
    TrueClass,
}

#[derive(Debug, Args, Serialize)]
pub struct LocateArgs {
    #[command(flatten)]
    pub store: StoreArgs,
    /// Dataset manifest (delimited text).
    #[arg(long)]
    pub manifest: PathBuf,
    /// Class prompt bank.
    #[arg(long)]
    pub class_bank: PathBuf,
    /// Classify the spurious attribute instead of the class.
    #[arg(long, requires = "spurious_bank")]
    pub spurious_task: bool,
    /// Spurious prompt bank (spurious-task mode).
    #[arg(long)]
    pub spurious_bank: Option<PathBuf>,
    /// Keep only the top head of each set.
    #[arg(long)]
    pub top1: bool,
    /// Fraction of negatively associated samples to use.
    #[arg(long, default_value_t = 1.0)]
    pub fraction: f64,
    /// Subsampling seed.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Class the per-sample importance is measured for.
    #[arg(long, value_enum, default_value = "predicted")]
    pub conditioning: ConditioningArg,
    /// Positively paired class of each spurious attribute, comma separated
    /// (default: attribute `s` pairs with class `s`).
    #[arg(long, value_delimiter = ',')]
    pub pairs: Option<Vec<usize>>,
    /// Output heads file.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ModeArg {
    /// No correction.
    Zs,
    /// Mean-ablation only.
    Ma,
    /// Knowledge injection only.
    Ki,
    /// Both corrections.
    Full,
    /// Both corrections on random heads.
    Random,
}

#[derive(Debug, Args, Serialize)]
pub struct CorrectArgs {
    #[command(flatten)]
    pub store: StoreArgs,
    /// Heads file from `locate` (not needed for `--mode zs`).
    #[arg(long, required_if_eq_any = [("mode", "ma"), ("mode", "ki"), ("mode", "full"), ("mode", "random")])]
    pub heads: Option<PathBuf>,
    /// Class prompt bank.
    #[arg(long)]
    pub class_bank: PathBuf,
    /// Concept pair bank.
    #[arg(long, required_if_eq_any = [("mode", "ki"), ("mode", "full"), ("mode", "random")])]
    pub concept_bank: Option<PathBuf>,
    /// Correction mode.
    #[arg(long, value_enum, default_value = "full")]
    pub mode: ModeArg,
    /// Ablate to zero instead of the dataset mean.
    #[arg(long)]
    pub zero_ablate: bool,
    /// Store whose records supply the ablation means (default: `--store`).
    #[arg(long)]
    pub mean_store: Option<PathBuf>,
    /// Manifest used to build per-class concept vectors when there are more
    /// than two classes.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Softmax temperature for margins.
    #[arg(long, default_value_t = headlens::correct::DEFAULT_TEMPERATURE)]
    pub temperature: f64,
    /// Seed for the random control.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output predictions file.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricArg {
    /// Worst-group accuracy, average and gap.
    Wg,
    /// Per-occupation accuracy difference between genders.
    Bias,
    /// MaxSkew@k of per-class retrieval rankings.
    Skew,
    /// Margin histograms of positively and negatively associated samples.
    Margins,
}

#[derive(Debug, Args, Serialize)]
pub struct EvaluateArgs {
    /// Predictions file from `correct`.
    #[arg(long)]
    pub preds: PathBuf,
    /// Dataset manifest.
    #[arg(long)]
    pub manifest: PathBuf,
    /// Metric.
    #[arg(long, value_enum)]
    pub metric: MetricArg,
    /// Retrieval depth for skew.
    #[arg(long, default_value_t = 10)]
    pub k: usize,
    /// Occupations in the top-bias average.
    #[arg(long, default_value_t = 10)]
    pub top: usize,
    /// Histogram bins for margins.
    #[arg(long, default_value_t = 10)]
    pub bins: usize,
    /// Positive pairs for margins (default identity).
    #[arg(long, value_delimiter = ',')]
    pub pairs: Option<Vec<usize>>,
    /// Output report file.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Subcommand, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum InterpretCommand {
    /// Per-patch logit contribution of a head set.
    Heatmap(HeatmapArgs),
    /// Shapley attribution of caption tokens.
    Shap(ShapArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadSetArg {
    /// Located spurious heads.
    Spurious,
    /// Located class heads.
    Target,
    /// Every head.
    All,
}

#[derive(Debug, Args, Serialize)]
pub struct HeatmapArgs {
    #[command(flatten)]
    pub store: StoreArgs,
    /// Heads file from `locate`.
    #[arg(long)]
    pub heads: PathBuf,
    /// Which heads to sum.
    #[arg(long, value_enum, default_value = "spurious")]
    pub set: HeadSetArg,
    /// Bank holding the text direction.
    #[arg(long)]
    pub text_bank: PathBuf,
    /// Label of the text direction in the bank.
    #[arg(long)]
    pub label: String,
    /// Restrict to these samples (default: all).
    #[arg(long, value_delimiter = ',')]
    pub samples: Option<Vec<String>>,
    /// Also write PGM images.
    #[arg(long)]
    pub pgm: bool,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum MethodArg {
    /// Exact up to the token limit, sampled beyond.
    Auto,
    /// Exact enumeration.
    Exact,
    /// Permutation sampling.
    Sampled,
}

#[derive(Debug, Args, Serialize)]
pub struct ShapArgs {
    #[command(flatten)]
    pub store: StoreArgs,
    /// Heads file from `locate`.
    #[arg(long)]
    pub heads: PathBuf,
    /// Which heads form the attributed state.
    #[arg(long, value_enum, default_value = "spurious")]
    pub set: HeadSetArg,
    /// Sample to attribute.
    #[arg(long)]
    pub sample: String,
    /// Token-subset embedding table of the sample's caption.
    #[arg(long)]
    pub provider: PathBuf,
    /// Estimator.
    #[arg(long, value_enum, default_value = "auto")]
    pub method: MethodArg,
    /// Permutations for the sampled estimator.
    #[arg(long, default_value_t = 2000)]
    pub permutations: usize,
    /// Base seed; the per-sample stream is derived from it.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output attribution file.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct SynthArgs {
    /// Generator configuration (default: built-in defaults).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override the configured seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParameterArg {
    /// Fraction of negatively associated samples used for locating.
    Fraction,
    /// Planted signal strength.
    Signal,
}

#[derive(Debug, Args, Serialize)]
pub struct SweepArgs {
    /// Base generator configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Swept parameter.
    #[arg(long, value_enum)]
    pub parameter: SweepParameterArg,
    /// Grid values, comma separated.
    #[arg(long, value_delimiter = ',', required = true)]
    pub values: Vec<f64>,
    /// Number of seeds, starting at `--first-seed`.
    #[arg(long, default_value_t = 10)]
    pub seeds: u64,
    /// First seed.
    #[arg(long, default_value_t = 0)]
    pub first_seed: u64,
    /// Output table.
    #[arg(long)]
    pub out: PathBuf,
}
