//! Stochastic gradient descent on the Poisson loss
//! `L = Σ_u y_u - log y_t` with respect to the metafeature weights.
//!
//! The per-example gradient of `L` with respect to `A(i, j)` is
//! `f_i M_ij (1 - t_j / y_j)`. Summed over an event's negative examples its
//! first term is `Σ_u M_iu`, which the aggregated rule redistributes over the
//! `C_ij` positive examples of each pair, giving
//! `M_ij (C_i* / C_ij - 1 / y_j)` per positive pair and nothing for negative
//! ones. Leave-one-out replaces the counts of each positive pair with those
//! of the corpus minus the current event.
//!
//! A gradient with respect to `A(i, j)` flows to every metafeature slot of
//! the pair scaled by the slot's bucket weight.

use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::adjustment::{sum_slots, Adjuster, Slot, SlotUpdate, SlotWeights};
use crate::corpus::{Sentence, WordId};
use crate::counts::{CountStore, FeatureId};
use crate::error::{Result, SnmError};
use crate::features::{FeatureKey, TemplateSet};
use crate::model::{ModelParts, SnmModel};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainerConfig {
    pub learning_rate: f64,
    pub epochs: u32,
    pub leave_one_out: bool,
    pub shuffle_seed: u64,
    /// Single worker, fixed event order. Multi-worker training lives in the
    /// std companion crate.
    pub deterministic: bool,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        TrainerConfig {
            learning_rate: 0.1,
            epochs: 1,
            leave_one_out: true,
            shuffle_seed: 0,
            deterministic: true,
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(SnmError::Config("learning rate must be finite and non-negative".into()));
        }
        if self.epochs < 1 {
            return Err(SnmError::Config("epochs must be at least 1".into()));
        }
        Ok(())
    }
}

/// Training events as feature ids of a [`CountStore`], stored flat.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct EncodedEvents {
    offsets: Vec<usize>,
    features: Vec<FeatureId>,
    targets: Vec<WordId>,
}

impl EncodedEvents {
    pub fn new() -> Self {
        EncodedEvents {
            offsets: vec![0],
            features: Vec::new(),
            targets: Vec::new(),
        }
    }

    /// Append one event. Feature ids should be in canonical key order.
    pub fn push(&mut self, features: &[FeatureId], target: WordId) {
        if self.offsets.is_empty() {
            self.offsets.push(0);
        }
        self.features.extend_from_slice(features);
        self.targets.push(target);
        self.offsets.push(self.features.len());
    }

    /// Extract and encode every event of `sentences`. Features missing from
    /// `counts` are dropped.
    pub fn from_sentences<'a, I>(sentences: I, templates: &TemplateSet, counts: &CountStore) -> Result<Self>
    where
        I: IntoIterator<Item = &'a Sentence>,
    {
        let mut out = EncodedEvents::new();
        let mut keys: Vec<FeatureKey> = Vec::new();
        let mut ids: Vec<FeatureId> = Vec::new();
        for s in sentences {
            for p in 1..s.len() {
                keys.clear();
                templates.extract_into(s, p, &mut keys)?;
                ids.clear();
                ids.extend(keys.iter().filter_map(|k| counts.lookup(k)));
                out.push(&ids, s[p]);
            }
        }
        Ok(out)
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn get(&self, k: usize) -> (&[FeatureId], WordId) {
        (&self.features[self.offsets[k]..self.offsets[k + 1]], self.targets[k])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&[FeatureId], WordId)> + '_ {
        (0..self.len()).map(move |k| self.get(k))
    }

    /// Append all events of `other`.
    pub fn extend(&mut self, other: &EncodedEvents) {
        for (f, t) in other.iter() {
            self.push(f, t);
        }
    }
}

/// `Σ_u y_u - ln y_t` for a sparse score vector.
pub fn poisson_loss(y: &BTreeMap<WordId, f64>, target: WordId) -> Result<f64> {
    let yt = y.get(&target).copied().unwrap_or(0.0);
    if yt <= 0.0 {
        return Err(SnmError::InfiniteLoss { target });
    }
    Ok(y.values().sum::<f64>() - libm::log(yt))
}

/// The two parts of a leave-one-out gradient with respect to `A(i, j)`.
///
/// `negative` belongs to the metafeatures built from counts
/// `(C_i* - 1, C_ij)` and `positive` to those from `(C_i* - 1, C_ij - 1)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LooGradient {
    pub negative: f64,
    pub positive: f64,
}

impl LooGradient {
    pub fn value(&self) -> f64 {
        self.negative + self.positive
    }
}

/// Gradient computations for one model and one set of weights, with
/// scratch buffers reused across events.
pub struct GradientEngine<'a> {
    counts: &'a CountStore,
    adjuster: Adjuster<'a>,
    slots: Vec<Slot>,
    /// Per-feature slot lists of the current event.
    pos_slots: Vec<Vec<Slot>>,
    neg_slots: Vec<Vec<Slot>>,
    entries: Vec<f64>,
}

/// Per-feature outcome of one event.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EventGradient {
    /// Gradient applied to the slots in `pos_slots`.
    pub positive: f64,
    /// Gradient applied to the slots in `neg_slots` (leave-one-out only).
    pub negative: f64,
}

impl<'a> GradientEngine<'a> {
    pub fn new(parts: ModelParts<'a>, layout: crate::adjustment::TableLayout) -> Result<Self> {
        Ok(GradientEngine {
            counts: parts.counts,
            adjuster: Adjuster::new(parts.vocab, *parts.mf_config, layout)?,
            slots: Vec::new(),
            pos_slots: Vec::new(),
            neg_slots: Vec::new(),
            entries: Vec::new(),
        })
    }

    pub fn for_model(model: &'a SnmModel) -> Self {
        GradientEngine::new(model.parts(), model.table().layout()).expect("validated model")
    }

    /// `e^{A} · pc / fc` under the given counts; zero when either is zero.
    pub fn entry<W: SlotWeights + ?Sized>(&mut self, weights: &W, i: FeatureId, j: WordId, fc: u64, pc: u64) -> f64 {
        if pc == 0 || fc == 0 {
            return 0.0;
        }
        self.adjuster.slots(self.counts.key(i), j, fc, pc, &mut self.slots);
        libm::exp(sum_slots(&self.slots, weights)) * pc as f64 / fc as f64
    }

    fn check_positive(&self, features: &[FeatureId], target: WordId, i: FeatureId) -> Result<u64> {
        if !features.contains(&i) {
            return Err(SnmError::Contract("feature is not active in the event".into()));
        }
        let c = self.counts.count(i, target);
        if c == 0 {
            return Err(SnmError::Contract("not a positive pair: C_ij = 0".into()));
        }
        Ok(c)
    }

    /// `y_j` over the active features.
    pub fn score<W: SlotWeights + ?Sized>(&mut self, weights: &W, features: &[FeatureId], target: WordId) -> f64 {
        features
            .iter()
            .map(|&k| {
                let (fc, pc) = (self.counts.total(k), self.counts.count(k, target));
                self.entry(weights, k, target, fc, pc)
            })
            .sum()
    }

    /// Aggregated positive-only gradient `M_ij (C_i*/C_ij - 1/y_j)`.
    pub fn gradient_aggregated<W: SlotWeights + ?Sized>(
        &mut self,
        weights: &W,
        features: &[FeatureId],
        target: WordId,
        i: FeatureId,
    ) -> Result<f64> {
        let cij = self.check_positive(features, target, i)?;
        let ci = self.counts.total(i);
        let y = self.score(weights, features, target);
        let m = self.entry(weights, i, target, ci, cij);
        Ok(m * (ci as f64 / cij as f64 - 1.0 / y))
    }

    /// `y'_j`: the score with the current event removed from every active
    /// feature's counts.
    pub fn score_loo<W: SlotWeights + ?Sized>(&mut self, weights: &W, features: &[FeatureId], target: WordId) -> f64 {
        features
            .iter()
            .map(|&k| {
                let (fc, pc) = (self.counts.total(k), self.counts.count(k, target));
                self.entry(weights, k, target, fc.saturating_sub(1), pc.saturating_sub(1))
            })
            .sum()
    }

    /// Leave-one-out gradient; `None` for singleton features, whose only
    /// observation is the event itself.
    pub fn gradient_leave_one_out<W: SlotWeights + ?Sized>(
        &mut self,
        weights: &W,
        features: &[FeatureId],
        target: WordId,
        i: FeatureId,
    ) -> Result<Option<LooGradient>> {
        let cij = self.check_positive(features, target, i)?;
        let ci = self.counts.total(i);
        if ci < 2 {
            return Ok(None);
        }
        let y_loo = self.score_loo(weights, features, target);
        Ok(Some(self.loo_terms(weights, i, target, ci, cij, y_loo)))
    }

    fn loo_terms<W: SlotWeights + ?Sized>(
        &mut self,
        weights: &W,
        i: FeatureId,
        target: WordId,
        ci: u64,
        cij: u64,
        y_loo: f64,
    ) -> LooGradient {
        let negative = if cij < ci {
            // (C_i* - C_ij)/C_ij negative examples, each worth
            // e^{A(C_i*-1, C_ij)} C_ij/(C_i*-1)
            self.entry(weights, i, target, ci - 1, cij) * (ci - cij) as f64 / cij as f64
        } else {
            0.0
        };
        let positive = if cij >= 2 {
            let m = self.entry(weights, i, target, ci - 1, cij - 1);
            m * (y_loo - 1.0) / y_loo
        } else {
            0.0
        };
        LooGradient { negative, positive }
    }

    /// Compute the gradients of every active feature of one event under the
    /// current weights, leaving the slot lists in `pos_slots`/`neg_slots`.
    /// Returns the event's (aggregated) loss contribution, or `None` when
    /// `y_t` is zero.
    fn event_gradients<W: SlotWeights + ?Sized>(
        &mut self,
        weights: &W,
        features: &[FeatureId],
        target: WordId,
        leave_one_out: bool,
        out: &mut Vec<EventGradient>,
    ) -> Option<f64> {
        let n = features.len();
        out.clear();
        if self.pos_slots.len() < n {
            self.pos_slots.resize_with(n, Vec::new);
            self.neg_slots.resize_with(n, Vec::new);
        }
        self.entries.clear();
        let mut y = 0.0;
        // First pass: the positive-example entries and y.
        for (k, &i) in features.iter().enumerate() {
            let ci = self.counts.total(i);
            let cij = self.counts.count(i, target);
            let (fc, pc) = if leave_one_out {
                (ci.saturating_sub(1), cij.saturating_sub(1))
            } else {
                (ci, cij)
            };
            let m = if pc == 0 || fc == 0 {
                self.pos_slots[k].clear();
                0.0
            } else {
                self.adjuster.slots(self.counts.key(i), target, fc, pc, &mut self.pos_slots[k]);
                libm::exp(sum_slots(&self.pos_slots[k], weights)) * pc as f64 / fc as f64
            };
            self.entries.push(m);
            y += m;
        }
        let mut loss = if y > 0.0 { Some(-libm::log(y)) } else { None };
        // Second pass: gradients.
        for (k, &i) in features.iter().enumerate() {
            let ci = self.counts.total(i);
            let cij = self.counts.count(i, target);
            let m = self.entries[k];
            self.neg_slots[k].clear();
            let g = if !leave_one_out {
                if cij == 0 {
                    EventGradient { positive: 0.0, negative: 0.0 }
                } else {
                    let scaled = m * ci as f64 / cij as f64;
                    if let Some(l) = loss.as_mut() {
                        *l += scaled;
                    }
                    EventGradient {
                        positive: scaled - m / y,
                        negative: 0.0,
                    }
                }
            } else if ci < 2 || cij == 0 {
                EventGradient { positive: 0.0, negative: 0.0 }
            } else {
                let positive = if m > 0.0 { m * (y - 1.0) / y } else { 0.0 };
                let negative = if cij < ci {
                    self.adjuster
                        .slots(self.counts.key(i), target, ci - 1, cij, &mut self.neg_slots[k]);
                    let e = libm::exp(sum_slots(&self.neg_slots[k], weights));
                    e * (ci - cij) as f64 / (ci - 1) as f64
                } else {
                    0.0
                };
                if let Some(l) = loss.as_mut() {
                    *l += negative + m;
                }
                EventGradient { positive, negative }
            };
            out.push(g);
        }
        loss
    }

    /// Accumulate `scale · gradient` into `sink` for every slot touched by
    /// the event (as computed by the last `event_gradients` call).
    fn apply(&self, grads: &[EventGradient], scale: f64, sink: &mut impl FnMut(usize, f64)) {
        for (k, g) in grads.iter().enumerate() {
            if g.positive != 0.0 {
                for s in &self.pos_slots[k] {
                    sink(s.index, scale * s.weight * g.positive);
                }
            }
            if g.negative != 0.0 {
                for s in &self.neg_slots[k] {
                    sink(s.index, scale * s.weight * g.negative);
                }
            }
        }
    }
}

/// Running statistics reported during training.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Progress {
    pub epoch: u32,
    pub events: u64,
    /// Mean aggregated Poisson loss over events with non-zero `y_t`.
    pub mean_loss: f64,
    /// Events whose target scored zero (skipped in the mean).
    pub unscored: u64,
}

#[derive(Default)]
struct LossTally {
    sum: f64,
    n: u64,
    unscored: u64,
}

impl LossTally {
    fn add(&mut self, l: Option<f64>) {
        match l {
            Some(l) => {
                self.sum += l;
                self.n += 1;
            }
            None => self.unscored += 1,
        }
    }

    fn progress(&self, epoch: u32, events: u64) -> Progress {
        Progress {
            epoch,
            events,
            mean_loss: if self.n > 0 { self.sum / self.n as f64 } else { 0.0 },
            unscored: self.unscored,
        }
    }
}

/// One online pass over `events` in the given order, updating `weights`
/// after every event. `report` is called every `report_every` events (if
/// non-zero) and once at the end.
#[allow(clippy::too_many_arguments)]
pub fn train_pass<W: SlotUpdate + ?Sized>(
    engine: &mut GradientEngine<'_>,
    weights: &mut W,
    events: &EncodedEvents,
    order: &[usize],
    cfg: &TrainerConfig,
    epoch: u32,
    report_every: u64,
    report: &mut dyn FnMut(&Progress),
) -> Progress {
    let mut grads = Vec::new();
    let mut tally = LossTally::default();
    let lr = cfg.learning_rate;
    for (n, &k) in order.iter().enumerate() {
        let (features, target) = events.get(k);
        let loss = engine.event_gradients(&*weights, features, target, cfg.leave_one_out, &mut grads);
        tally.add(loss);
        if lr != 0.0 {
            engine.apply(&grads, -lr, &mut |slot, d| weights.add(slot, d));
        }
        let done = n as u64 + 1;
        if report_every > 0 && done.is_multiple_of(report_every) {
            report(&tally.progress(epoch, done));
        }
    }
    let p = tally.progress(epoch, order.len() as u64);
    report(&p);
    p
}

/// Deterministic single-worker training followed by `finalize`.
pub fn train(
    model: &mut SnmModel,
    events: &EncodedEvents,
    cfg: &TrainerConfig,
    report_every: u64,
    report: &mut dyn FnMut(&Progress),
) -> Result<Progress> {
    cfg.validate()?;
    let mut last = Progress::default();
    {
        let layout = model.table().layout();
        let (parts, table) = model.parts_mut();
        let mut engine = GradientEngine::new(parts, layout)?;
        let mut order: Vec<usize> = (0..events.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.shuffle_seed);
        for epoch in 0..cfg.epochs {
            order.shuffle(&mut rng);
            last = train_pass(&mut engine, table, events, &order, cfg, epoch, report_every, report);
        }
    }
    model.finalize();
    Ok(last)
}

/// Event order used by [`train`] for each epoch.
pub fn epoch_orders(n: usize, cfg: &TrainerConfig) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.shuffle_seed);
    (0..cfg.epochs)
        .map(|_| {
            order.shuffle(&mut rng);
            order.clone()
        })
        .collect()
}

/// Gradient of the summed loss over all events with respect to every slot,
/// holding the weights fixed (batch mode).
pub fn batch_gradient(model: &SnmModel, events: &EncodedEvents, leave_one_out: bool) -> Vec<f64> {
    let mut engine = GradientEngine::for_model(model);
    let mut grad = vec![0.0; model.table().layout().len()];
    let mut grads = Vec::new();
    for (features, target) in events.iter() {
        engine.event_gradients(model.table(), features, target, leave_one_out, &mut grads);
        engine.apply(&grads, 1.0, &mut |slot, d| grad[slot] += d);
    }
    grad
}

/// Total Poisson loss `Σ_e (Σ_{i ∈ Pos(f_e)} rowsum_i - ln y_{t_e})` of a
/// finalized model.
pub fn batch_poisson_loss(model: &SnmModel, events: &EncodedEvents) -> Result<f64> {
    let sums = model
        .row_sums()
        .ok_or_else(|| SnmError::Contract("model is not finalized".into()))?;
    let mut engine = GradientEngine::for_model(model);
    let mut total = 0.0;
    for (features, target) in events.iter() {
        let y = engine.score(model.table(), features, target);
        if y <= 0.0 {
            return Err(SnmError::InfiniteLoss { target });
        }
        total += features.iter().map(|&i| sums[i as usize]).sum::<f64>() - libm::log(y);
    }
    Ok(total)
}
