//! `ctp`: build a phase-transition-labeled clinical-trial corpus and
//! predict trial phase transitions with a random forest over text
//! embeddings or a fine-tuned chat model.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use ctp_cli::commands;
use ctp_cli::config;
use ctp_cli::synth::{SignalSpec, SyntheticSpec};
use ctp_core::linkage::LabelValue;

#[derive(Parser)]
#[command(name = "ctp", version, about, long_about = None)]
struct Cli {
    /// TOML configuration file; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run seed, echoed into every output's metadata.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parse, validate, and normalize trial and tracker files.
    Ingest {
        #[arg(long)]
        trials: PathBuf,
        #[arg(long)]
        tracker: PathBuf,
        #[arg(long, default_value = "ingested")]
        out_dir: PathBuf,
    },
    /// Link trials to tracker records and assign transition labels.
    Label {
        #[arg(long)]
        trials: PathBuf,
        #[arg(long)]
        tracker: PathBuf,
        #[arg(long, default_value = "labeled.jsonl")]
        out: PathBuf,
        /// Also write the unlabeled remainder.
        #[arg(long)]
        unlabeled_out: Option<PathBuf>,
        /// Write link statistics as JSON.
        #[arg(long)]
        stats_out: Option<PathBuf>,
    },
    /// Render labeled trials as description texts.
    Synthesize {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value = "descriptions.jsonl")]
        out: PathBuf,
        /// Character budget per description (default from config).
        #[arg(long)]
        budget: Option<usize>,
    },
    /// Chronological train/validation/test split.
    Split {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value = "splits")]
        out_dir: PathBuf,
        /// Downsample majority classes in train and validation.
        #[arg(long)]
        balance: bool,
    },
    /// Embed labeled trials into feature vectors.
    Embed {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value = "vectors.ctpe")]
        out: PathBuf,
        /// Per-attribute embedding dimension (default from config).
        #[arg(long)]
        dim: Option<usize>,
    },
    /// Train the random-forest classifier.
    TrainRf {
        #[arg(long)]
        vectors: PathBuf,
        #[arg(long)]
        train: PathBuf,
        #[arg(long, default_value = "forest.ctpf")]
        out: PathBuf,
        /// Tree count (default from config).
        #[arg(long)]
        trees: Option<usize>,
    },
    /// Predict with a trained forest.
    PredictRf {
        #[arg(long)]
        forest: PathBuf,
        #[arg(long)]
        vectors: PathBuf,
        /// Restrict predictions to the trials in this labeled file.
        #[arg(long)]
        subset: Option<PathBuf>,
        #[arg(long, default_value = "predictions.jsonl")]
        out: PathBuf,
    },
    /// Export labeled trials as chat-format fine-tuning data.
    ExportFinetune {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value = "finetune.jsonl")]
        out: PathBuf,
        /// Teach termination reasons on No labels.
        #[arg(long)]
        reasoning: bool,
        #[arg(long)]
        budget: Option<usize>,
    },
    /// Submit a fine-tune job and poll it to completion.
    Finetune {
        #[arg(long)]
        export: PathBuf,
        /// Base model id (default from config).
        #[arg(long)]
        base_model: Option<String>,
        /// Use the offline replay stub instead of the HTTP service.
        #[arg(long)]
        stub: bool,
        #[arg(long)]
        job_out: Option<PathBuf>,
        #[arg(long, default_value_t = 2000)]
        poll_interval_ms: u64,
        #[arg(long, default_value_t = 900)]
        max_polls: usize,
    },
    /// Request predictions from a chat model.
    LlmPredict {
        #[arg(long)]
        model: String,
        #[arg(long)]
        descriptions: PathBuf,
        /// Replay-stub fixture file; runs with zero network access.
        #[arg(long)]
        stub: Option<PathBuf>,
        #[arg(long, default_value = "llm_predictions.jsonl")]
        out: PathBuf,
    },
    /// Score predictions against gold labels.
    Evaluate {
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long)]
        gold: PathBuf,
        /// Write <prefix>.csv and <prefix>.json reports.
        #[arg(long)]
        out_prefix: Option<String>,
    },
    /// Drop-feature importance by retraining without each attribute.
    FeatureImportance {
        #[arg(long)]
        vectors: PathBuf,
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        test: PathBuf,
        #[arg(long, default_value = "feature_importance.csv")]
        out: PathBuf,
        #[arg(long)]
        trees: Option<usize>,
    },
    /// Corpus statistics: per-phase outcomes and drug-class ratios.
    Stats {
        #[arg(long)]
        labeled: PathBuf,
        #[arg(long)]
        unlabeled: Option<PathBuf>,
        #[arg(long, default_value = "stats")]
        out_dir: PathBuf,
    },
    /// Generate a consistent synthetic trial + tracker corpus.
    GenSynthetic(GenSyntheticArgs),
}

#[derive(Args)]
struct GenSyntheticArgs {
    #[arg(long, default_value_t = 1000)]
    n: usize,
    #[arg(long, default_value = "synthetic")]
    out_dir: PathBuf,
    /// Phase I/II/III proportions.
    #[arg(long, value_delimiter = ',', num_args = 3, default_values_t = [0.25, 0.45, 0.30])]
    phase_mix: Vec<f64>,
    #[arg(long, default_value_t = 0.5)]
    yes_frac: f64,
    #[arg(long, default_value_t = 0.5)]
    no_frac: f64,
    /// Attribute receiving the planted signal token.
    #[arg(long, requires = "signal_token")]
    signal_attribute: Option<String>,
    #[arg(long)]
    signal_token: Option<String>,
    #[arg(long, default_value_t = 1.0)]
    signal_strength: f64,
    /// Label class receiving the signal (yes | no).
    #[arg(long, default_value = "no")]
    signal_class: String,
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let config = config::load(cli.config.as_deref(), cli.seed)?;
    match cli.command {
        Command::Ingest {
            trials,
            tracker,
            out_dir,
        } => commands::ingest(&config, &trials, &tracker, &out_dir),
        Command::Label {
            trials,
            tracker,
            out,
            unlabeled_out,
            stats_out,
        } => commands::label(
            &config,
            &trials,
            &tracker,
            &out,
            unlabeled_out.as_deref(),
            stats_out.as_deref(),
        ),
        Command::Synthesize { input, out, budget } => {
            commands::synthesize(&config, &input, &out, budget)
        }
        Command::Split {
            input,
            out_dir,
            balance,
        } => commands::split(&config, &input, &out_dir, balance),
        Command::Embed { input, out, dim } => commands::embed(&config, &input, &out, dim),
        Command::TrainRf {
            vectors,
            train,
            out,
            trees,
        } => commands::train_rf(&config, &vectors, &train, &out, trees),
        Command::PredictRf {
            forest,
            vectors,
            subset,
            out,
        } => commands::predict_rf(&config, &forest, &vectors, subset.as_deref(), &out),
        Command::ExportFinetune {
            input,
            out,
            reasoning,
            budget,
        } => commands::export_finetune(&config, &input, &out, reasoning, budget),
        Command::Finetune {
            export,
            base_model,
            stub,
            job_out,
            poll_interval_ms,
            max_polls,
        } => commands::finetune(
            &config,
            &export,
            base_model.as_deref(),
            stub,
            job_out.as_deref(),
            poll_interval_ms,
            max_polls,
        ),
        Command::LlmPredict {
            model,
            descriptions,
            stub,
            out,
        } => commands::llm_predict(&config, &model, &descriptions, stub.as_deref(), &out),
        Command::Evaluate {
            predictions,
            gold,
            out_prefix,
        } => commands::evaluate(&config, &predictions, &gold, out_prefix.as_deref()),
        Command::FeatureImportance {
            vectors,
            train,
            test,
            out,
            trees,
        } => commands::feature_importance(&config, &vectors, &train, &test, &out, trees),
        Command::Stats {
            labeled,
            unlabeled,
            out_dir,
        } => commands::stats(&config, &labeled, unlabeled.as_deref(), &out_dir),
        Command::GenSynthetic(args) => {
            let signal = match (&args.signal_attribute, &args.signal_token) {
                (Some(attribute), Some(token)) => Some(SignalSpec {
                    attribute: attribute.clone(),
                    token: token.clone(),
                    strength: args.signal_strength,
                    class: match args.signal_class.to_ascii_lowercase().as_str() {
                        "yes" => LabelValue::Yes,
                        "no" => LabelValue::No,
                        other => anyhow::bail!("signal class must be yes or no, got {other:?}"),
                    },
                }),
                _ => None,
            };
            let spec = SyntheticSpec {
                n_trials: args.n,
                phase_mix: [args.phase_mix[0], args.phase_mix[1], args.phase_mix[2]],
                label_mix: (args.yes_frac, args.no_frac),
                signal,
                seed: config.seed,
            };
            commands::gen_synthetic(&config, &spec, &args.out_dir)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(error) => {
            eprintln!("error: {error:#}");
            ExitCode::from(1)
        }
    }
}
