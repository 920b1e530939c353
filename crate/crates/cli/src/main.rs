//! `plp`: one-shot estimate of a vision-language model's zero-shot accuracy.

mod commands;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use plp_core::features::{AggregationMode, Variant, DEFAULT_LABEL_TEMPLATE, DEFAULT_N_COUNTERFACTUALS};
use plp_core::{Categorized, Category};

#[derive(Parser, Debug)]
#[command(name = "plp", version, about = "Predict zero-shot accuracy from one labelled image per class")]
struct Cli {
    /// Seed for every sampling step.
    #[arg(long, global = true, default_value_t = 42)]
    seed: u64,

    /// Embedding backend: local:<model_dir>, remote:<url> or mock:<spec_file>.
    #[arg(long, global = true)]
    backend: Option<String>,

    /// Log more (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct ManifestArgs {
    /// Tab-separated manifest: image_ref, class_label, split.
    #[arg(long)]
    manifest: PathBuf,
    /// Defaults to the manifest file stem.
    #[arg(long)]
    dataset_id: Option<String>,
}

#[derive(Args, Debug, Clone)]
struct LlmArgs {
    /// OpenAI-compatible base URL, or `stub:` for the offline stub.
    #[arg(long, default_value = "https://api.openai.com/v1")]
    llm_base_url: String,
    /// Defaults to gpt-5-nano, or `stub` with the stub endpoint.
    #[arg(long)]
    llm_model: Option<String>,
    /// Defaults to 60, unlimited in practice with the stub endpoint.
    #[arg(long)]
    llm_requests_per_minute: Option<u32>,
    #[arg(long, default_value_t = 4)]
    llm_concurrency: usize,
    #[arg(long, default_value_t = 2)]
    llm_max_retries: u32,
    #[arg(long, default_value_t = 60)]
    llm_timeout_secs: u64,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Caption one probe image per class (plausible + counterfactuals).
    Captions {
        #[command(flatten)]
        manifest: ManifestArgs,
        #[command(flatten)]
        llm: LlmArgs,
        #[arg(long, default_value_t = DEFAULT_N_COUNTERFACTUALS)]
        n_counterfactuals: usize,
        /// Bundle directory; existing bundles are reused.
        #[arg(long)]
        out: PathBuf,
    },
    /// Fill the embedding cache for a dataset's images and caption texts.
    Embed {
        #[command(flatten)]
        manifest: ManifestArgs,
        /// Bundle directory whose captions are embedded too.
        #[arg(long)]
        bundles: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Similarity features, one row per class.
    Features {
        #[command(flatten)]
        manifest: ManifestArgs,
        #[arg(long)]
        bundles: PathBuf,
        #[arg(long, default_value = "full")]
        variant: Variant,
        #[arg(long, default_value_t = DEFAULT_N_COUNTERFACTUALS)]
        n_counterfactuals: usize,
        /// Other-label prompts per row; defaults to --n-counterfactuals.
        #[arg(long)]
        c_other_labels: Option<usize>,
        #[arg(long, default_value = DEFAULT_LABEL_TEMPLATE)]
        template: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Ground-truth zero-shot accuracy on the test split.
    Zeroshot {
        #[command(flatten)]
        manifest: ManifestArgs,
        #[arg(long, default_value = DEFAULT_LABEL_TEMPLATE)]
        template: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit the ridge regressor on feature files and zero-shot reports.
    Train {
        /// Feature files or directories of `*.features.jsonl`.
        #[arg(long, num_args = 1.., required = true)]
        features: Vec<PathBuf>,
        /// Report files or directories of `*.zeroshot.json`.
        #[arg(long, num_args = 1.., required = true)]
        reports: Vec<PathBuf>,
        #[arg(long, default_value = "full")]
        variant: Variant,
        #[arg(long, default_value = "per-row")]
        mode: AggregationMode,
        /// Comma-separated lambda values; defaults to 13 log-spaced points in [1e-3, 1e3].
        #[arg(long, value_delimiter = ',')]
        lambda_grid: Option<Vec<f64>>,
        /// Model file to write.
        #[arg(long)]
        out: PathBuf,
    },
    /// Predict dataset accuracy from feature files.
    Predict {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, num_args = 1.., required = true)]
        features: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pearson-r and RMSE of predictions against ground truth.
    Metrics {
        /// TSV of dataset_id, true, predicted.
        #[arg(long, conflicts_with = "predictions")]
        values: Option<PathBuf>,
        /// Units of the --values file.
        #[arg(long, default_value = "fraction")]
        units: plp_core::Units,
        /// Prediction files or directories of `*.prediction.json`.
        #[arg(long, num_args = 1.., requires = "reports")]
        predictions: Vec<PathBuf>,
        #[arg(long, num_args = 1..)]
        reports: Vec<PathBuf>,
        /// Report in percent rather than fraction.
        #[arg(long)]
        percent: bool,
        /// Directory for metrics.json.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train, predict and score all three feature variants on one split.
    Ablate {
        /// Full-variant feature files or directories.
        #[arg(long, num_args = 1.., required = true)]
        features: Vec<PathBuf>,
        #[arg(long, num_args = 1.., required = true)]
        reports: Vec<PathBuf>,
        /// Held-out dataset ids; defaults to a seeded 30% sample.
        #[arg(long, value_delimiter = ',')]
        holdout: Option<Vec<String>>,
        #[arg(long, default_value = "per-row")]
        mode: AggregationMode,
        #[arg(long, value_delimiter = ',')]
        lambda_grid: Option<Vec<f64>>,
        /// Report RMSE in percent rather than fraction.
        #[arg(long)]
        percent: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a synthetic corpus for the mock backend.
    Synth {
        /// JSON corpus spec; defaults to the built-in sweep.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Captions { .. } => "captions",
            Command::Embed { .. } => "embed",
            Command::Features { .. } => "features",
            Command::Zeroshot { .. } => "zeroshot",
            Command::Train { .. } => "train",
            Command::Predict { .. } => "predict",
            Command::Metrics { .. } => "metrics",
            Command::Ablate { .. } => "ablate",
            Command::Synth { .. } => "synth",
        }
    }
}

/// A failed command: message chain plus the exit-code category.
pub struct Failure {
    category: Category,
    message: String,
}

impl Failure {
    pub fn config(message: impl Into<String>) -> Self {
        Self {
            category: Category::Config,
            message: message.into(),
        }
    }
}

impl<E: Categorized + std::error::Error> From<E> for Failure {
    fn from(e: E) -> Self {
        let mut message = e.to_string();
        let mut source = e.source();
        while let Some(s) = source {
            let text = s.to_string();
            if !message.contains(&text) {
                message.push_str(": ");
                message.push_str(&text);
            }
            source = s.source();
        }
        Self {
            category: e.category(),
            message,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

fn exit_code(c: Category) -> u8 {
    match c {
        Category::Config => 2,
        Category::Data => 3,
        Category::Network => 4,
        Category::Internal => 5,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    let name = cli.command.name();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("plp {name}: error: {f}");
            ExitCode::from(exit_code(f.category))
        }
    }
}
