//! Multi-threaded counting, training and evaluation.
//!
//! Work is split into contiguous shards, one per worker. Counting and
//! evaluation reduce shard results with associative merges, so their output
//! does not depend on the worker count. Training with more than one worker
//! is Hogwild-style: workers update a shared weight table without locks and
//! lost updates are tolerated.

use std::sync::atomic::{AtomicU64, Ordering};
use std::thread;

use anyhow::Result;

use snm_core::adjustment::{SlotUpdate, SlotWeights, TableLayout, WeightTable};
use snm_core::corpus::{Sentence, Vocabulary, WordCounts};
use snm_core::counts::{merge, CountAccumulator, CountStore};
use snm_core::evaluation::{EvalTally, LanguageModel};
use snm_core::features::{Event, TemplateSet};
use snm_core::model::SnmModel;
use snm_core::training::{train_pass, EncodedEvents, GradientEngine, Progress, TrainerConfig};

/// Available parallelism, or 1 when unknown.
pub fn default_workers() -> usize {
    thread::available_parallelism().map_or(1, |n| n.get())
}

fn shards<T>(items: &[T], workers: usize) -> impl Iterator<Item = &[T]> {
    let w = workers.clamp(1, items.len().max(1));
    let n = items.len();
    (0..w).map(move |k| &items[k * n / w..(k + 1) * n / w])
}

/// Run `f` on every shard in its own thread and collect results in shard
/// order.
fn map_shards<T: Sync, R: Send>(items: &[T], workers: usize, f: impl Fn(&[T]) -> R + Sync) -> Vec<R> {
    if workers <= 1 {
        return vec![f(items)];
    }
    thread::scope(|s| {
        let handles: Vec<_> = shards(items, workers).map(|shard| s.spawn(|| f(shard))).collect();
        handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
    })
}

pub fn word_counts(lines: &[String], workers: usize) -> WordCounts {
    map_shards(lines, workers, |shard| {
        let mut wc = WordCounts::new();
        for l in shard {
            wc.add_line(l);
        }
        wc
    })
    .into_iter()
    .fold(WordCounts::new(), |mut acc, wc| {
        acc.merge(wc);
        acc
    })
}

/// Feature–target counts of every event in `sentences`, with feature ids in
/// canonical key order.
pub fn count_events(
    sentences: &[Sentence],
    templates: &TemplateSet,
    vocab: &Vocabulary,
    workers: usize,
) -> Result<CountStore> {
    let parts = map_shards(sentences, workers, |shard| -> Result<CountStore> {
        let mut acc = CountAccumulator::new(vocab);
        let mut event = Event {
            features: Vec::new(),
            target: 0,
        };
        for s in shard {
            for p in 1..s.len() {
                event.features.clear();
                templates.extract_into(s, p, &mut event.features)?;
                event.target = s[p];
                acc.add_event(&event);
            }
        }
        Ok(acc.finish())
    });
    let mut stores = parts.into_iter().collect::<Result<Vec<_>>>()?.into_iter();
    let first = stores.next().map_or_else(|| CountStore::empty(vocab), CountStore::canonicalize);
    stores.try_fold(first, |acc, s| Ok(merge(&acc, &s)?))
}

/// Encode events against `counts` in parallel, preserving sentence order.
pub fn encode_events(
    sentences: &[Sentence],
    templates: &TemplateSet,
    counts: &CountStore,
    workers: usize,
) -> Result<EncodedEvents> {
    let parts = map_shards(sentences, workers, |shard| EncodedEvents::from_sentences(shard, templates, counts));
    let mut out = EncodedEvents::new();
    for p in parts {
        out.extend(&p?);
    }
    Ok(out)
}

pub fn evaluate<M: LanguageModel + Sync + ?Sized>(
    model: &M,
    sentences: &[Sentence],
    workers: usize,
) -> Result<EvalTally> {
    let parts = map_shards(sentences, workers, |shard| -> Result<EvalTally> {
        let mut t = EvalTally::default();
        let mut scratch = Vec::new();
        for s in shard {
            t.add_sentence(model, s, &mut scratch)?;
        }
        Ok(t)
    });
    let mut total = EvalTally::default();
    for p in parts {
        total.merge(&p?);
    }
    Ok(total)
}

/// Weight table whose cells hold `f64` bit patterns, shared between
/// training threads.
pub struct AtomicTable {
    layout: TableLayout,
    cells: Vec<AtomicU64>,
}

impl AtomicTable {
    pub fn new(table: &WeightTable) -> Self {
        AtomicTable {
            layout: table.layout(),
            cells: table.as_slice().iter().map(|w| AtomicU64::new(w.to_bits())).collect(),
        }
    }

    pub fn handle(&self) -> SharedWeights<'_> {
        SharedWeights(&self.cells)
    }

    pub fn into_table(self) -> WeightTable {
        let weights = self.cells.into_iter().map(|c| f64::from_bits(c.into_inner())).collect();
        WeightTable::from_weights(self.layout, weights).expect("layout unchanged")
    }
}

/// One worker's view of an [`AtomicTable`]. Updates are a relaxed load and
/// store, so concurrent writes to the same slot may be lost.
#[derive(Clone, Copy)]
pub struct SharedWeights<'a>(&'a [AtomicU64]);

impl SlotWeights for SharedWeights<'_> {
    #[inline]
    fn weight(&self, slot: usize) -> f64 {
        f64::from_bits(self.0[slot].load(Ordering::Relaxed))
    }
}

impl SlotUpdate for SharedWeights<'_> {
    #[inline]
    fn add(&mut self, slot: usize, delta: f64) {
        let cell = &self.0[slot];
        let v = f64::from_bits(cell.load(Ordering::Relaxed)) + delta;
        cell.store(v.to_bits(), Ordering::Relaxed);
    }
}

/// One epoch over `order` split across `workers` threads sharing the
/// weights. Only the first worker reports progress; the returned progress
/// combines all workers.
#[allow(clippy::too_many_arguments)]
pub fn hogwild_pass(
    model: &mut SnmModel,
    events: &EncodedEvents,
    order: &[usize],
    cfg: &TrainerConfig,
    epoch: u32,
    workers: usize,
    report_every: u64,
    report: &(dyn Fn(&Progress) + Sync),
) -> Result<Progress> {
    let table = AtomicTable::new(model.table());
    let layout = model.table().layout();
    let parts = model.parts();
    let results = thread::scope(|s| -> Result<Vec<Progress>> {
        let handles: Vec<_> = shards(order, workers)
            .enumerate()
            .map(|(k, shard)| {
                let table = &table;
                s.spawn(move || -> Result<Progress> {
                    let mut engine = GradientEngine::new(parts, layout)?;
                    let mut weights = table.handle();
                    let mut quiet = |_: &Progress| {};
                    let mut loud = |p: &Progress| report(p);
                    let sink: &mut dyn FnMut(&Progress) = if k == 0 { &mut loud } else { &mut quiet };
                    Ok(train_pass(&mut engine, &mut weights, events, shard, cfg, epoch, report_every, sink))
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
    })?;
    model.set_table(table.into_table())?;
    let events_done: u64 = results.iter().map(|p| p.events).sum();
    let scored: f64 = results.iter().map(|p| (p.events - p.unscored) as f64).sum();
    let mean_loss = if scored > 0.0 {
        results.iter().map(|p| p.mean_loss * (p.events - p.unscored) as f64).sum::<f64>() / scored
    } else {
        0.0
    };
    Ok(Progress {
        epoch,
        events: events_done,
        mean_loss,
        unscored: results.iter().map(|p| p.unscored).sum(),
    })
}
