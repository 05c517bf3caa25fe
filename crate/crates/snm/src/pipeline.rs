//! The steps behind each subcommand, usable without the command line.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use log::info;
use serde::Deserialize;

use snm_core::adjustment::{enumerate_metafeatures, MetafeatureConfig, PairDescriptor, TableLayout, WeightTable};
use snm_core::corpus::{Sentence, Vocabulary};
use snm_core::evaluation::{interpolate, optimize_weights, EvalReport, ProbabilityStream, UniformModel};
use snm_core::features::{FeatureKey, TemplateSet};
use snm_core::model::SnmModel;
use snm_core::training::{epoch_orders, train_pass, EncodedEvents, GradientEngine, Progress, TrainerConfig};

use crate::formats::{self, read_counts, read_lines, read_model, read_stream, read_vocab, write_atomic, write_atomic_with};
use crate::parallel;
use crate::presets;

/// Every setting a pipeline run can take, as read from a TOML file. Field
/// names match the command-line flags with `-` replaced by `_`.
#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub corpus: Option<PathBuf>,
    pub vocab: Option<PathBuf>,
    pub counts: Option<PathBuf>,
    pub model: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub streams: Option<Vec<PathBuf>>,
    pub dev_streams: Option<Vec<PathBuf>>,
    pub report: Option<PathBuf>,
    pub stream_out: Option<PathBuf>,
    pub templates: Option<PathBuf>,
    pub preset: Option<String>,
    pub min_count: Option<u64>,
    pub bits: Option<u8>,
    pub seed: Option<u64>,
    pub mf_feature: Option<bool>,
    pub mf_type: Option<bool>,
    pub mf_feature_count: Option<bool>,
    pub mf_target: Option<bool>,
    pub mf_pair_count: Option<bool>,
    pub double_bucket_feature_count: Option<bool>,
    pub double_bucket_pair_count: Option<bool>,
    pub learning_rate: Option<f64>,
    pub epochs: Option<u32>,
    pub leave_one_out: Option<bool>,
    pub shuffle_seed: Option<u64>,
    pub deterministic: Option<bool>,
    pub workers: Option<usize>,
    pub log_every: Option<u64>,
    pub checkpoint_every: Option<u64>,
    pub checkpoint: Option<PathBuf>,
    pub weights: Option<Vec<f64>>,
}

impl PipelineConfig {
    pub fn parse(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("parsing config {}", path.display()))
    }
}

/// Templates from a file path or a bundled preset name.
pub fn load_templates(path: Option<&Path>, preset: Option<&str>) -> Result<TemplateSet> {
    match (path, preset) {
        (Some(_), Some(_)) => bail!("give either a template file or a preset, not both"),
        (Some(p), None) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            TemplateSet::parse(&text).with_context(|| format!("parsing templates {}", p.display()))
        }
        (None, Some(name)) => {
            let text = presets::preset(name).with_context(|| {
                format!("unknown preset {name:?} (known: {})", presets::names().collect::<Vec<_>>().join(", "))
            })?;
            Ok(TemplateSet::parse(text)?)
        }
        (None, None) => bail!("no templates given"),
    }
}

pub fn tokenize_all(vocab: &Vocabulary, lines: &[String]) -> Vec<Sentence> {
    lines.iter().map(|l| vocab.tokenize(l)).collect()
}

pub fn build_vocab(corpus: &Path, output: &Path, min_count: u64, workers: usize) -> Result<Vocabulary> {
    let lines = read_lines(corpus)?;
    let wc = parallel::word_counts(&lines, workers);
    let vocab = Vocabulary::from_counts(&wc, min_count)?;
    info!("vocabulary: {} words from {} sentences", vocab.len(), wc.sentences());
    write_atomic(output, formats::format_vocab(&vocab).as_bytes())?;
    Ok(vocab)
}

pub fn count(corpus: &Path, vocab: &Path, templates: &TemplateSet, output: &Path, workers: usize) -> Result<()> {
    let vocab = read_vocab(vocab)?;
    let sentences = tokenize_all(&vocab, &read_lines(corpus)?);
    let store = parallel::count_events(&sentences, templates, &vocab, workers)?;
    info!("counts: {} features, {} pairs", store.len(), store.pair_count());
    write_atomic_with(output, |w| formats::write_counts(w, &store, &vocab, templates))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainJob {
    pub corpus: PathBuf,
    pub vocab: PathBuf,
    pub counts: PathBuf,
    pub output: PathBuf,
    /// Start from this model's weights instead of zeros.
    pub init: Option<PathBuf>,
    pub bits: u8,
    pub seed: u64,
    pub mf: MetafeatureConfig,
    pub trainer: TrainerConfig,
    pub workers: usize,
    pub log_every: u64,
    /// Write a checkpoint every this many events (0: only at epoch ends
    /// when `checkpoint` is set).
    pub checkpoint_every: u64,
    pub checkpoint: Option<PathBuf>,
}

/// Model over the count file with zero or initial weights, plus its training
/// events.
pub fn prepare_training(job: &TrainJob) -> Result<(SnmModel, EncodedEvents)> {
    let vocab = read_vocab(&job.vocab)?;
    let (counts, templates) = read_counts(&job.counts, &vocab)?;
    let layout = TableLayout::new(job.bits, job.seed)?;
    let table = match &job.init {
        Some(p) => {
            let init = read_model(p)?;
            ensure!(init.table().layout() == layout, "initial model has a different table layout");
            init.table().clone()
        }
        None => WeightTable::new(layout),
    };
    let sentences = tokenize_all(&vocab, &read_lines(&job.corpus)?);
    let events = parallel::encode_events(&sentences, &templates, &counts, job.workers)?;
    let model = SnmModel::new(vocab, templates, job.mf, counts, table)?;
    Ok((model, events))
}

fn log_progress(p: &Progress) {
    info!(
        "epoch {} events {} loss {:.6} unscored {}",
        p.epoch + 1,
        p.events,
        p.mean_loss,
        p.unscored
    );
}

/// SGD over `events`; single-threaded and reproducible when
/// `trainer.deterministic` is set or `workers == 1`.
pub fn train_model(
    model: &mut SnmModel,
    events: &EncodedEvents,
    trainer: &TrainerConfig,
    workers: usize,
    log_every: u64,
    checkpoint_every: u64,
    checkpoint: Option<&Path>,
) -> Result<Progress> {
    trainer.validate()?;
    let orders = epoch_orders(events.len(), trainer);
    let mut last = Progress::default();
    let serial = trainer.deterministic || workers <= 1;
    for (epoch, order) in orders.iter().enumerate() {
        let epoch = epoch as u32;
        if serial {
            let chunk = if checkpoint.is_some() && checkpoint_every > 0 {
                checkpoint_every as usize
            } else {
                order.len().max(1)
            };
            for (k, part) in order.chunks(chunk).enumerate() {
                let layout = model.table().layout();
                let (parts, table) = model.parts_mut();
                let mut engine = GradientEngine::new(parts, layout)?;
                last = train_pass(&mut engine, table, events, part, trainer, epoch, log_every, &mut log_progress);
                let done = (k * chunk + part.len()) as u64;
                if let Some(path) = checkpoint.filter(|_| done < order.len() as u64) {
                    formats::write_model(path, model)?;
                    info!("checkpoint after {done} events: {}", path.display());
                }
            }
        } else {
            last = parallel::hogwild_pass(model, events, order, trainer, epoch, workers, log_every, &log_progress)?;
            log_progress(&last);
        }
        if let Some(path) = checkpoint {
            formats::write_model(path, model)?;
        }
    }
    model.finalize();
    Ok(last)
}

pub fn train(job: &TrainJob) -> Result<SnmModel> {
    let (mut model, events) = prepare_training(job)?;
    info!(
        "training on {} events, {} features, 2^{} weights",
        events.len(),
        model.counts().len(),
        job.bits
    );
    train_model(
        &mut model,
        &events,
        &job.trainer,
        job.workers,
        job.log_every,
        job.checkpoint_every,
        job.checkpoint.as_deref(),
    )?;
    formats::write_model(&job.output, &model)?;
    Ok(model)
}

/// Which model `eval` scores.
#[derive(Debug, Clone, PartialEq)]
pub enum EvalModel {
    Snm(PathBuf),
    /// Uniform over the words of a vocabulary file.
    Uniform(PathBuf),
}

pub fn eval(model: &EvalModel, test: &Path, stream_out: Option<&Path>, workers: usize) -> Result<EvalReport> {
    let lines = read_lines(test)?;
    let (report, stream) = match model {
        EvalModel::Snm(p) => {
            let m = read_model(p)?;
            let sentences = tokenize_all(m.vocab(), &lines);
            let report = parallel::evaluate(&m, &sentences, workers)?.report()?;
            let stream = match stream_out {
                Some(_) => Some(ProbabilityStream::from_model(&m, &sentences)?.0),
                None => None,
            };
            (report, stream)
        }
        EvalModel::Uniform(v) => {
            let vocab = read_vocab(v)?;
            let u = UniformModel::new(vocab.len())?;
            let sentences = tokenize_all(&vocab, &lines);
            let report = parallel::evaluate(&u, &sentences, workers)?.report()?;
            let stream = match stream_out {
                Some(_) => Some(ProbabilityStream::from_model(&u, &sentences)?.0),
                None => None,
            };
            (report, stream)
        }
    };
    if let (Some(path), Some(s)) = (stream_out, stream) {
        write_atomic(path, formats::format_stream(&s).as_bytes())?;
    }
    Ok(report)
}

/// Mixture perplexity of `streams`. Weights are taken as given, or fitted
/// by EM on `dev` streams (or on `streams` themselves) when absent.
pub fn interpolate_streams(
    streams: &[PathBuf],
    weights: Option<&[f64]>,
    dev: Option<&[PathBuf]>,
) -> Result<(EvalReport, Vec<f64>)> {
    let test = streams.iter().map(|p| read_stream(p)).collect::<Result<Vec<_>>>()?;
    let weights = match weights {
        Some(w) => w.to_vec(),
        None => {
            let dev = match dev {
                Some(d) => d.iter().map(|p| read_stream(p)).collect::<Result<Vec<_>>>()?,
                None => test.clone(),
            };
            ensure!(dev.len() == test.len(), "{} dev streams for {} test streams", dev.len(), test.len());
            let fit = optimize_weights(&dev)?;
            if fit.degenerate {
                log::warn!("all dev streams are identical; using uniform weights");
            }
            info!("EM weights after {} iterations: {:?}", fit.iterations, fit.weights);
            fit.weights
        }
    };
    Ok((interpolate(&test, &weights)?, weights))
}

/// Human-readable breakdown of a feature (optionally one of its targets) or
/// of a metafeature key.
pub fn inspect(model: &SnmModel, query: &str, target: Option<&str>) -> Result<String> {
    let mut out = String::new();
    let layout = model.table().layout();
    if query.starts_with("mf|") {
        let slot = layout.slot(query);
        writeln!(out, "metafeature: {query}")?;
        writeln!(out, "slot: {slot}")?;
        writeln!(out, "weight: {}", model.table().as_slice()[slot])?;
        return Ok(out);
    }
    let vocab = model.vocab();
    let counts = model.counts();
    let key = FeatureKey::parse(query, vocab).with_context(|| format!("feature {query:?} not found"))?;
    let Some(i) = counts.lookup(&key) else {
        bail!("feature {query:?} not found");
    };
    let row = counts.row(i);
    let row_sum = model.row_sums().map_or_else(|| model.compute_row_sums()[i as usize], |s| s[i as usize]);
    writeln!(out, "feature: {query}")?;
    writeln!(out, "type: {}", key.type_name())?;
    writeln!(out, "id: {i}")?;
    writeln!(out, "total: {}", row.total)?;
    writeln!(out, "targets: {}", row.targets.len())?;
    writeln!(out, "row_sum: {row_sum}")?;
    match target {
        None => {
            writeln!(out, "target\tcount\tentry")?;
            for (&t, &c) in row.targets.iter().zip(row.counts) {
                writeln!(out, "{}\t{c}\t{}", vocab.word(t), model.entry(i, t)?)?;
            }
        }
        Some(word) => {
            let t = vocab.id(word).with_context(|| format!("target {word:?} not found"))?;
            let c = counts.count(i, t);
            ensure!(c > 0, "pair ({query}, {word}) not found");
            writeln!(out, "target: {word}")?;
            writeln!(out, "count: {c}")?;
            let ty = key.type_name();
            let d = PairDescriptor {
                feature_key: query,
                feature_type: &ty,
                target: word,
                feature_count: row.total,
                pair_count: c,
            };
            writeln!(out, "metafeature\tslot\tbucket_weight\tweight\tcontribution")?;
            let mut a = 0.0;
            for mf in enumerate_metafeatures(&d, model.mf_config())? {
                let slot = layout.slot(&mf.key);
                let theta = model.table().as_slice()[slot];
                a += mf.weight * theta;
                writeln!(out, "{}\t{slot}\t{}\t{theta}\t{}", mf.key, mf.weight, mf.weight * theta)?;
            }
            writeln!(out, "adjustment: {a}")?;
            writeln!(out, "entry: {}", model.entry(i, t)?)?;
        }
    }
    Ok(out)
}
