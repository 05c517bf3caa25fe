//! The SNM model: `M_ij = e^{A(i,j)} C_ij / C_i*`, scores `y = M f` and
//! conditional probabilities normalized with precomputed row sums.

use alloc::collections::BTreeMap;
use alloc::vec::Vec;
use core::sync::atomic::{AtomicU64, Ordering};

use crate::adjustment::{sum_slots, Adjuster, MetafeatureConfig, Slot, SlotWeights, WeightTable};
use crate::corpus::{Vocabulary, WordId};
use crate::counts::{CountStore, FeatureId};
use crate::error::{Result, SnmError};
use crate::features::{FeatureKey, TemplateSet};

/// Everything but the weights.
#[derive(Debug, Clone, Copy)]
pub struct ModelParts<'a> {
    pub vocab: &'a Vocabulary,
    pub counts: &'a CountStore,
    pub mf_config: &'a MetafeatureConfig,
}

/// A conditional probability, flagged when the model had no usable evidence
/// and the floor value was substituted.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Probability {
    pub value: f64,
    pub flagged: bool,
}

#[derive(Debug)]
pub struct SnmModel {
    vocab: Vocabulary,
    templates: TemplateSet,
    mf_config: MetafeatureConfig,
    counts: CountStore,
    table: WeightTable,
    row_sums: Option<Vec<f64>>,
    empty_feature: Option<FeatureId>,
    row_lookups: AtomicU64,
}

impl Clone for SnmModel {
    fn clone(&self) -> Self {
        SnmModel {
            vocab: self.vocab.clone(),
            templates: self.templates.clone(),
            mf_config: self.mf_config,
            counts: self.counts.clone(),
            table: self.table.clone(),
            row_sums: self.row_sums.clone(),
            empty_feature: self.empty_feature,
            row_lookups: AtomicU64::new(0),
        }
    }
}

/// `e^A · C_ij / C_i*` for one pair, with `A` read from `weights`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn entry_value<W: SlotWeights + ?Sized>(
    adjuster: &mut Adjuster<'_>,
    slots: &mut Vec<Slot>,
    weights: &W,
    key: &FeatureKey,
    target: WordId,
    feature_count: u64,
    pair_count: u64,
) -> f64 {
    if pair_count == 0 {
        return 0.0;
    }
    adjuster.slots(key, target, feature_count, pair_count, slots);
    libm::exp(sum_slots(slots, weights)) * pair_count as f64 / feature_count as f64
}

impl SnmModel {
    pub fn new(
        vocab: Vocabulary,
        templates: TemplateSet,
        mf_config: MetafeatureConfig,
        counts: CountStore,
        table: WeightTable,
    ) -> Result<Self> {
        mf_config.validate()?;
        if counts.vocab_fingerprint() != vocab.fingerprint() {
            return Err(SnmError::Config("counts were built on a different vocabulary".into()));
        }
        let empty_feature = counts.lookup(&FeatureKey::empty());
        Ok(SnmModel {
            vocab,
            templates,
            mf_config,
            counts,
            table,
            row_sums: None,
            empty_feature,
            row_lookups: AtomicU64::new(0),
        })
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn templates(&self) -> &TemplateSet {
        &self.templates
    }

    pub fn mf_config(&self) -> &MetafeatureConfig {
        &self.mf_config
    }

    pub fn counts(&self) -> &CountStore {
        &self.counts
    }

    pub fn table(&self) -> &WeightTable {
        &self.table
    }

    pub fn row_sums(&self) -> Option<&[f64]> {
        self.row_sums.as_deref()
    }

    pub fn is_finalized(&self) -> bool {
        self.row_sums.is_some()
    }

    /// Probability assigned when no evidence is available: `1 / (10 |V|)`.
    pub fn floor_probability(&self) -> f64 {
        1.0 / (10.0 * self.vocab.len() as f64)
    }

    /// Replace the weight table. Row sums become stale and are dropped.
    pub fn set_table(&mut self, table: WeightTable) -> Result<()> {
        if table.layout() != self.table.layout() {
            return Err(SnmError::Config("weight table layout mismatch".into()));
        }
        self.table = table;
        self.row_sums = None;
        Ok(())
    }

    /// Mutable access to the weights for training; clears row sums.
    pub fn table_mut(&mut self) -> &mut WeightTable {
        self.row_sums = None;
        &mut self.table
    }

    /// Split borrow for training: read-only model parts plus the weights.
    pub fn parts_mut(&mut self) -> (ModelParts<'_>, &mut WeightTable) {
        self.row_sums = None;
        (
            ModelParts {
                vocab: &self.vocab,
                counts: &self.counts,
                mf_config: &self.mf_config,
            },
            &mut self.table,
        )
    }

    pub fn parts(&self) -> ModelParts<'_> {
        ModelParts {
            vocab: &self.vocab,
            counts: &self.counts,
            mf_config: &self.mf_config,
        }
    }

    pub fn adjuster(&self) -> Adjuster<'_> {
        Adjuster::new(&self.vocab, self.mf_config, self.table.layout())
            .expect("config validated at construction")
    }

    /// Compute `Σ_u M_iu` for every feature.
    pub fn finalize(&mut self) {
        let sums = self.compute_row_sums();
        self.row_sums = Some(sums);
    }

    pub fn compute_row_sums(&self) -> Vec<f64> {
        let mut adj = self.adjuster();
        let mut slots = Vec::new();
        (0..self.counts.len() as FeatureId)
            .map(|i| {
                let row = self.counts.row(i);
                let key = self.counts.key(i);
                row.targets
                    .iter()
                    .zip(row.counts)
                    .map(|(&t, &c)| entry_value(&mut adj, &mut slots, &self.table, key, t, row.total, c))
                    .sum()
            })
            .collect()
    }

    /// Install row sums read from storage.
    pub fn set_row_sums(&mut self, sums: Vec<f64>) -> Result<()> {
        if sums.len() != self.counts.len() {
            return Err(SnmError::Input("row sum count does not match features".into()));
        }
        self.row_sums = Some(sums);
        Ok(())
    }

    /// Rows consulted by probability calls since the last reset.
    pub fn row_lookups(&self) -> u64 {
        self.row_lookups.load(Ordering::Relaxed)
    }

    pub fn reset_row_lookups(&self) {
        self.row_lookups.store(0, Ordering::Relaxed);
    }

    pub fn scorer(&self) -> Scorer<'_> {
        Scorer {
            model: self,
            adjuster: self.adjuster(),
            slots: Vec::new(),
            ids: Vec::new(),
        }
    }

    pub fn entry(&self, i: FeatureId, j: WordId) -> Result<f64> {
        self.scorer().entry(i, j)
    }

    pub fn score(&self, features: &[FeatureKey]) -> Result<BTreeMap<WordId, f64>> {
        self.scorer().score(features)
    }

    pub fn probability(&self, features: &[FeatureKey], target: WordId) -> Result<Probability> {
        self.scorer().probability(features, target)
    }
}

fn resolve_into(model: &SnmModel, features: &[FeatureKey], ids: &mut Vec<FeatureId>) {
    ids.clear();
    ids.extend(features.iter().filter_map(|k| model.counts.lookup(k)));
    if ids.is_empty() {
        ids.extend(model.empty_feature);
    }
}

/// Evaluation handle holding scratch buffers; one per thread.
pub struct Scorer<'m> {
    model: &'m SnmModel,
    adjuster: Adjuster<'m>,
    slots: Vec<Slot>,
    ids: Vec<FeatureId>,
}

impl<'m> Scorer<'m> {
    pub fn model(&self) -> &'m SnmModel {
        self.model
    }

    /// `M_ij`; zero when the pair was never observed.
    pub fn entry(&mut self, i: FeatureId, j: WordId) -> Result<f64> {
        let counts = &self.model.counts;
        if i as usize >= counts.len() {
            return Err(SnmError::Lookup {
                kind: "feature id",
                key: alloc::format!("{i}"),
            });
        }
        Ok(self.entry_unchecked(i, j))
    }

    fn entry_unchecked(&mut self, i: FeatureId, j: WordId) -> f64 {
        let counts = &self.model.counts;
        let c = counts.count(i, j);
        entry_value(
            &mut self.adjuster,
            &mut self.slots,
            &self.model.table,
            counts.key(i),
            j,
            counts.total(i),
            c,
        )
    }

    /// Map features to ids, dropping unseen ones. If none survive, fall back
    /// to the empty context when the model has it.
    pub fn resolve(&mut self, features: &[FeatureKey]) -> &[FeatureId] {
        resolve_into(self.model, features, &mut self.ids);
        &self.ids
    }

    /// Sparse `y = M f` over the union of the active rows.
    pub fn score(&mut self, features: &[FeatureKey]) -> Result<BTreeMap<WordId, f64>> {
        if features.is_empty() {
            return Err(SnmError::Domain("empty feature set".into()));
        }
        let ids: Vec<FeatureId> = self.resolve(features).to_vec();
        self.score_ids(&ids)
    }

    pub fn score_ids(&mut self, ids: &[FeatureId]) -> Result<BTreeMap<WordId, f64>> {
        let mut y = BTreeMap::new();
        let counts = &self.model.counts;
        for &i in ids {
            let row = counts.row(i);
            let key = counts.key(i);
            for (&t, &c) in row.targets.iter().zip(row.counts) {
                let m = entry_value(&mut self.adjuster, &mut self.slots, &self.model.table, key, t, row.total, c);
                *y.entry(t).or_insert(0.0) += m;
            }
        }
        Ok(y)
    }

    /// `P(target | f) = y_target / Σ_{i ∈ Pos(f)} rowsum_i`.
    pub fn probability(&mut self, features: &[FeatureKey], target: WordId) -> Result<Probability> {
        if features.is_empty() {
            return Err(SnmError::Domain("empty feature set".into()));
        }
        let mut ids = core::mem::take(&mut self.ids);
        resolve_into(self.model, features, &mut ids);
        let p = self.probability_ids(&ids, target);
        self.ids = ids;
        p
    }

    pub fn probability_ids(&mut self, ids: &[FeatureId], target: WordId) -> Result<Probability> {
        let sums = self
            .model
            .row_sums
            .as_deref()
            .ok_or_else(|| SnmError::Contract("model is not finalized".into()))?;
        self.model
            .row_lookups
            .fetch_add(ids.len() as u64, Ordering::Relaxed);
        let mut num = 0.0;
        let mut den = 0.0;
        for &i in ids {
            den += sums[i as usize];
            num += self.entry_unchecked(i, target);
        }
        if den > 0.0 && num > 0.0 {
            Ok(Probability {
                value: num / den,
                flagged: false,
            })
        } else {
            Ok(Probability {
                value: self.model.floor_probability(),
                flagged: true,
            })
        }
    }
}
