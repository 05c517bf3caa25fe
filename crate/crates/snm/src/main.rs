use std::fmt;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use snm::formats::{self, write_atomic};
use snm::parallel::default_workers;
use snm::pipeline::{self, EvalModel, PipelineConfig, TrainJob};
use snm_core::adjustment::MetafeatureConfig;
use snm_core::training::TrainerConfig;

#[derive(Parser)]
#[command(name = "snm", version, about = "Sparse non-negative matrix language models")]
struct Cli {
    /// TOML file supplying any flag; flags given on the command line win.
    #[arg(long, global = true, env = "SNM_CONFIG")]
    config: Option<PathBuf>,
    /// Worker threads (default: available parallelism).
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Single worker, reproducible output.
    #[arg(long, global = true)]
    deterministic: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Count words and write a vocabulary file.
    BuildVocab(BuildVocabArgs),
    /// Accumulate feature-target counts.
    Count(CountArgs),
    /// Train adjustment weights and write a model.
    Train(TrainArgs),
    /// Held-out perplexity of a model.
    Eval(EvalArgs),
    /// Perplexity of a linear mixture of probability streams.
    Interpolate(InterpolateArgs),
    /// Show counts, entries and weights behind a feature or metafeature.
    Inspect(InspectArgs),
}

#[derive(Args)]
struct BuildVocabArgs {
    #[arg(long, env = "SNM_CORPUS")]
    corpus: Option<PathBuf>,
    /// Output vocabulary file.
    #[arg(long, env = "SNM_VOCAB")]
    vocab: Option<PathBuf>,
    /// Words seen fewer times map to <UNK> (default 1).
    #[arg(long)]
    min_count: Option<u64>,
}

#[derive(Args)]
struct TemplateArgs {
    /// Template file.
    #[arg(long, env = "SNM_TEMPLATES")]
    templates: Option<PathBuf>,
    /// Bundled template set: snm5, snm5-skip or snm10-skip.
    #[arg(long)]
    preset: Option<String>,
}

#[derive(Args)]
struct CountArgs {
    #[arg(long, env = "SNM_CORPUS")]
    corpus: Option<PathBuf>,
    #[arg(long, env = "SNM_VOCAB")]
    vocab: Option<PathBuf>,
    /// Output counts file.
    #[arg(long, env = "SNM_COUNTS")]
    counts: Option<PathBuf>,
    #[command(flatten)]
    templates: TemplateArgs,
}

#[derive(Args)]
struct MetafeatureArgs {
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    mf_feature: Option<bool>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    mf_type: Option<bool>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    mf_feature_count: Option<bool>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    mf_target: Option<bool>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    mf_pair_count: Option<bool>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    double_bucket_feature_count: Option<bool>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    double_bucket_pair_count: Option<bool>,
}

#[derive(Args)]
struct TrainArgs {
    /// Training text; events are extracted with the templates stored in the
    /// counts file.
    #[arg(long, env = "SNM_CORPUS")]
    corpus: Option<PathBuf>,
    #[arg(long, env = "SNM_VOCAB")]
    vocab: Option<PathBuf>,
    #[arg(long, env = "SNM_COUNTS")]
    counts: Option<PathBuf>,
    /// Output model file.
    #[arg(long, env = "SNM_MODEL")]
    model: Option<PathBuf>,
    /// Start from this model's weights.
    #[arg(long)]
    init: Option<PathBuf>,
    /// log2 of the weight table size (default 20).
    #[arg(long)]
    bits: Option<u8>,
    /// Metafeature hash seed (default 0).
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    mf: MetafeatureArgs,
    /// Constant SGD step size (default 0.1; 0.01 suits corpora around 1M
    /// tokens).
    #[arg(long)]
    learning_rate: Option<f64>,
    /// Passes over the training events (default 1).
    #[arg(long)]
    epochs: Option<u32>,
    /// Exclude each event from its own counts when computing its gradient
    /// (default true).
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    leave_one_out: Option<bool>,
    /// Seed for the per-epoch event shuffle.
    #[arg(long)]
    shuffle_seed: Option<u64>,
    /// Log progress every this many events.
    #[arg(long)]
    log_every: Option<u64>,
    /// Checkpoint every this many events.
    #[arg(long)]
    checkpoint_every: Option<u64>,
    /// Checkpoint model file.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long, env = "SNM_MODEL", conflicts_with = "uniform")]
    model: Option<PathBuf>,
    /// Score with a uniform distribution over the vocabulary instead.
    #[arg(long)]
    uniform: bool,
    /// Vocabulary for `--uniform`.
    #[arg(long, env = "SNM_VOCAB")]
    vocab: Option<PathBuf>,
    #[arg(long, env = "SNM_TEST")]
    test: Option<PathBuf>,
    /// Also write the report here.
    #[arg(long, env = "SNM_REPORT")]
    report: Option<PathBuf>,
    /// Write per-token log10 probabilities here.
    #[arg(long)]
    stream_out: Option<PathBuf>,
}

#[derive(Args)]
struct InterpolateArgs {
    /// Test-set probability streams, one per model.
    #[arg(long, value_delimiter = ',', env = "SNM_STREAMS")]
    streams: Option<Vec<PathBuf>>,
    /// Mixture weights; fitted by EM when absent.
    #[arg(long, value_delimiter = ',')]
    weights: Option<Vec<f64>>,
    /// Streams to fit weights on (default: the test streams).
    #[arg(long, value_delimiter = ',')]
    dev_streams: Option<Vec<PathBuf>>,
    #[arg(long, env = "SNM_REPORT")]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct InspectArgs {
    #[arg(long, env = "SNM_MODEL")]
    model: Option<PathBuf>,
    /// Feature key such as `[the quick]`, or a metafeature key `mf|...`.
    key: String,
    /// Show the adjustment breakdown for this target word.
    #[arg(long)]
    target: Option<String>,
}

/// Missing or contradictory settings, reported with exit status 2.
#[derive(Debug)]
struct UsageError(String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn need<T>(v: Option<T>, flag: &str) -> Result<T> {
    v.ok_or_else(|| UsageError(format!("missing --{flag}")).into())
}

fn write_report(text: &str, path: Option<&Path>) -> Result<()> {
    print!("{text}");
    if let Some(p) = path {
        write_atomic(p, text.as_bytes())?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let cfg = match &cli.config {
        Some(p) => PipelineConfig::load(p).map_err(|e| UsageError(format!("{e:#}")))?,
        None => PipelineConfig::default(),
    };
    let deterministic = cli.deterministic || cfg.deterministic.unwrap_or(false);
    let workers = if deterministic {
        1
    } else {
        cli.workers.or(cfg.workers).unwrap_or_else(default_workers).max(1)
    };
    match cli.command {
        Command::BuildVocab(a) => {
            let corpus = need(a.corpus.or(cfg.corpus), "corpus")?;
            let vocab = need(a.vocab.or(cfg.vocab), "vocab")?;
            let min_count = a.min_count.or(cfg.min_count).unwrap_or(1);
            pipeline::build_vocab(&corpus, &vocab, min_count, workers)?;
        }
        Command::Count(a) => {
            let corpus = need(a.corpus.or(cfg.corpus), "corpus")?;
            let vocab = need(a.vocab.or(cfg.vocab), "vocab")?;
            let counts = need(a.counts.or(cfg.counts), "counts")?;
            let path = a.templates.templates.or(cfg.templates);
            let preset = a.templates.preset.or(cfg.preset);
            if path.is_none() && preset.is_none() {
                return Err(UsageError("missing --templates or --preset".into()).into());
            }
            let templates = pipeline::load_templates(path.as_deref(), preset.as_deref())?;
            pipeline::count(&corpus, &vocab, &templates, &counts, workers)?;
        }
        Command::Train(a) => {
            let d = MetafeatureConfig::default();
            let mf = MetafeatureConfig {
                feature: a.mf.mf_feature.or(cfg.mf_feature).unwrap_or(d.feature),
                feature_type: a.mf.mf_type.or(cfg.mf_type).unwrap_or(d.feature_type),
                feature_count: a.mf.mf_feature_count.or(cfg.mf_feature_count).unwrap_or(d.feature_count),
                target: a.mf.mf_target.or(cfg.mf_target).unwrap_or(d.target),
                pair_count: a.mf.mf_pair_count.or(cfg.mf_pair_count).unwrap_or(d.pair_count),
                double_bucket_feature_count: a
                    .mf
                    .double_bucket_feature_count
                    .or(cfg.double_bucket_feature_count)
                    .unwrap_or(d.double_bucket_feature_count),
                double_bucket_pair_count: a
                    .mf
                    .double_bucket_pair_count
                    .or(cfg.double_bucket_pair_count)
                    .unwrap_or(d.double_bucket_pair_count),
            };
            let t = TrainerConfig::default();
            let trainer = TrainerConfig {
                learning_rate: a.learning_rate.or(cfg.learning_rate).unwrap_or(t.learning_rate),
                epochs: a.epochs.or(cfg.epochs).unwrap_or(t.epochs),
                leave_one_out: a.leave_one_out.or(cfg.leave_one_out).unwrap_or(t.leave_one_out),
                shuffle_seed: a.shuffle_seed.or(cfg.shuffle_seed).unwrap_or(t.shuffle_seed),
                deterministic,
            };
            trainer.validate().map_err(|e| UsageError(e.to_string()))?;
            let job = TrainJob {
                corpus: need(a.corpus.or(cfg.corpus), "corpus")?,
                vocab: need(a.vocab.or(cfg.vocab), "vocab")?,
                counts: need(a.counts.or(cfg.counts), "counts")?,
                output: need(a.model.or(cfg.model), "model")?,
                init: a.init,
                bits: a.bits.or(cfg.bits).unwrap_or(20),
                seed: a.seed.or(cfg.seed).unwrap_or(0),
                mf,
                trainer,
                workers,
                log_every: a.log_every.or(cfg.log_every).unwrap_or(100_000),
                checkpoint_every: a.checkpoint_every.or(cfg.checkpoint_every).unwrap_or(0),
                checkpoint: a.checkpoint.or(cfg.checkpoint),
            };
            pipeline::train(&job)?;
        }
        Command::Eval(a) => {
            let test = need(a.test.or(cfg.test), "test")?;
            let model = if a.uniform {
                EvalModel::Uniform(need(a.vocab.or(cfg.vocab), "vocab")?)
            } else {
                EvalModel::Snm(need(a.model.or(cfg.model), "model")?)
            };
            let stream_out = a.stream_out.or(cfg.stream_out);
            let report = pipeline::eval(&model, &test, stream_out.as_deref(), workers)?;
            write_report(&formats::format_report(&report), a.report.or(cfg.report).as_deref())?;
        }
        Command::Interpolate(a) => {
            let streams = need(a.streams.or(cfg.streams), "streams")?;
            let weights = a.weights.or(cfg.weights);
            let dev = a.dev_streams.or(cfg.dev_streams);
            let (report, w) = pipeline::interpolate_streams(&streams, weights.as_deref(), dev.as_deref())?;
            let w: Vec<String> = w.iter().map(|x| x.to_string()).collect();
            let text = format!("weights: {}\n{}", w.join(","), formats::format_report(&report));
            write_report(&text, a.report.or(cfg.report).as_deref())?;
        }
        Command::Inspect(a) => {
            let path = need(a.model.or(cfg.model), "model")?;
            let model = formats::read_model(&path)?;
            // Built in full before printing so failures leave no partial output.
            let text = pipeline::inspect(&model, &a.key, a.target.as_deref())
                .with_context(|| format!("inspecting {}", path.display()))?;
            print!("{text}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return ExitCode::from(code as u8);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
