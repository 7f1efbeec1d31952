use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use opgrain_core::enrich::{NoiseMode, Variant};
use opgrain_core::DEFAULT_RESOLUTION;
use opgrain_gateway::{SampleReduction, TemplateName};

use crate::report::ScoreSource;

#[derive(Debug, Parser)]
#[command(name = "opgrain", version, about = "Operating-point granularity of verbalized classifier scores")]
pub struct Cli {
    /// Seed for every random draw; recorded in outputs.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Resolution of the granularity scan; 1/resolution must be an integer.
    #[arg(long, global = true, default_value_t = DEFAULT_RESOLUTION)]
    pub resolution: f64,

    /// Output path; reports go to stdout when omitted.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,

    #[arg(long, global = true, value_enum, default_value_t = Format::Json)]
    pub format: Format,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    /// JSON reports and JSONL record files.
    Json,
    Csv,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic prediction file from a simulator config.
    Simulate {
        #[arg(long)]
        config: PathBuf,
    },
    /// Metric suite for one prediction file.
    Analyze {
        input: PathBuf,
        /// Write pr.svg and roc.svg here.
        #[arg(long)]
        plots_dir: Option<PathBuf>,
        #[arg(long, default_value_t = opgrain_core::metrics::DEFAULT_ECE_BINS)]
        ece_bins: usize,
        /// Extra score columns built from temperature-1 samples.
        #[arg(long, value_enum, value_delimiter = ',')]
        aggregate: Vec<ScoreSource>,
    },
    /// One table row per prediction file, written to <out>.json and <out>.csv.
    Compare {
        #[arg(required = true, num_args = 2..)]
        inputs: Vec<PathBuf>,
    },
    /// Spread tied scores into distinct values.
    Enrich {
        #[command(subcommand)]
        action: EnrichCommand,
    },
    /// Rounding-bias diagnostics on written score strings.
    Bias { input: PathBuf },
    /// Query a chat-completion endpoint.
    Gateway {
        #[command(subcommand)]
        action: GatewayCommand,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum VariantArg {
    OneCall,
    TwoCall,
}

impl From<VariantArg> for Variant {
    fn from(v: VariantArg) -> Self {
        match v {
            VariantArg::OneCall => Variant::OneCall,
            VariantArg::TwoCall => Variant::TwoCall,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum NoiseArg {
    Adaptive,
    None,
    InputAdditive,
    Feature,
}

impl From<NoiseArg> for NoiseMode {
    fn from(v: NoiseArg) -> Self {
        match v {
            NoiseArg::Adaptive => NoiseMode::Adaptive,
            NoiseArg::None => NoiseMode::None,
            NoiseArg::InputAdditive => NoiseMode::InputAdditive,
            NoiseArg::Feature => NoiseMode::Feature,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum EnrichCommand {
    /// Add bounded uniform noise below the next larger score.
    Unsupervised { input: PathBuf },
    /// Fit the noise calibrator on labeled records; writes a model file.
    Train {
        input: PathBuf,
        #[arg(long, value_enum, default_value_t = VariantArg::OneCall)]
        variant: VariantArg,
        /// Training config JSON; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum)]
        noise_mode: Option<NoiseArg>,
    },
    /// Score records with a trained model.
    Apply {
        input: PathBuf,
        #[arg(long)]
        model: PathBuf,
    },
}

#[derive(Debug, Args)]
pub struct GatewayArgs {
    /// JSONL of {"id", "text", "label"?, "dataset_id"?}.
    #[arg(long)]
    pub instances: PathBuf,
    /// Gateway config JSON; flags below override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub endpoint: Option<String>,
    #[arg(long)]
    pub model: Option<String>,
    #[arg(long)]
    pub temperature: Option<f64>,
    #[arg(long)]
    pub samples: Option<usize>,
    #[arg(long)]
    pub max_in_flight: Option<usize>,
    #[arg(long)]
    pub max_attempts: Option<u32>,
    #[arg(long)]
    pub backoff_ms: Option<u64>,
    #[arg(long)]
    pub timeout_ms: Option<u64>,
    /// Environment variable holding the API key.
    #[arg(long)]
    pub api_key_env: Option<String>,
    /// With several samples, also make one temperature-0 call per instance.
    #[arg(long)]
    pub greedy_pass: bool,
    /// Reduction of prediction lists: random, mean or median.
    #[arg(long)]
    pub reduction: Option<SampleReduction>,
    /// Task description.
    #[arg(long, conflicts_with = "context_file")]
    pub context: Option<String>,
    #[arg(long)]
    pub context_file: Option<PathBuf>,
    /// Class names, positive class first.
    #[arg(long, value_delimiter = ',', required = true)]
    pub classes: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum GatewayCommand {
    /// One prompt per call with verbalized class scores.
    Classify {
        /// e.g. baseline, two_decimals, score_range(100), multiple_predictions.
        #[arg(long, default_value = "baseline")]
        template: TemplateName,
        #[command(flatten)]
        args: GatewayArgs,
    },
    /// Decision call followed by a confidence call.
    TwoStage {
        /// Ask for step-by-step reasoning before the confidence.
        #[arg(long)]
        cot: bool,
        #[command(flatten)]
        args: GatewayArgs,
    },
}
