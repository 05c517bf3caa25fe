//! Sparse feature–target count matrix.
//!
//! [`CountAccumulator`] collects pair counts in a hash map while streaming
//! events; [`CountAccumulator::finish`] freezes them into a [`CountStore`]
//! with compressed rows sorted by target id. Row totals are exact integers
//! and always equal the sum of the row.

use alloc::vec::Vec;
use core::hash::BuildHasher;

use hashbrown::{DefaultHashBuilder, HashMap, HashTable};

use crate::corpus::{Vocabulary, WordId};
use crate::error::{Result, SnmError};
use crate::features::{Event, FeatureKey};

pub type FeatureId = u32;

/// Feature keys with dense ids, indexed by a hash table of ids so that each
/// key is stored once.
#[derive(Debug, Clone, Default)]
struct KeyIndex {
    keys: Vec<FeatureKey>,
    table: HashTable<FeatureId>,
    hasher: DefaultHashBuilder,
}

impl KeyIndex {
    fn with_keys(keys: Vec<FeatureKey>) -> Result<Self> {
        let mut index = KeyIndex::default();
        index.table.reserve(keys.len(), |_| 0);
        for (id, key) in keys.iter().enumerate() {
            let h = index.hasher.hash_one(key);
            if index.table.find(h, |&i| &keys[i as usize] == key).is_some() {
                return Err(SnmError::Input("duplicate feature key".into()));
            }
            let (keys_ref, hasher) = (&keys, &index.hasher);
            index
                .table
                .insert_unique(h, id as FeatureId, |&i| hasher.hash_one(&keys_ref[i as usize]));
        }
        index.keys = keys;
        Ok(index)
    }

    fn get(&self, key: &FeatureKey) -> Option<FeatureId> {
        let h = self.hasher.hash_one(key);
        self.table.find(h, |&i| &self.keys[i as usize] == key).copied()
    }

    fn get_or_insert(&mut self, key: &FeatureKey) -> FeatureId {
        let h = self.hasher.hash_one(key);
        if let Some(&id) = self.table.find(h, |&i| &self.keys[i as usize] == key) {
            return id;
        }
        let id = self.keys.len() as FeatureId;
        self.keys.push(key.clone());
        let (keys, hasher) = (&self.keys, &self.hasher);
        self.table
            .insert_unique(h, id, |&i| hasher.hash_one(&keys[i as usize]));
        id
    }
}

/// Streaming builder for a [`CountStore`]. Feature ids are assigned in
/// first-encounter order.
#[derive(Debug, Clone)]
pub struct CountAccumulator {
    vocab_fingerprint: u64,
    index: KeyIndex,
    pairs: HashMap<(FeatureId, WordId), u64>,
}

impl CountAccumulator {
    pub fn new(vocab: &Vocabulary) -> Self {
        CountAccumulator {
            vocab_fingerprint: vocab.fingerprint(),
            index: KeyIndex::default(),
            pairs: HashMap::new(),
        }
    }

    /// Each feature–target pair of the event counts once.
    pub fn add_event(&mut self, event: &Event) {
        for key in &event.features {
            let id = self.index.get_or_insert(key);
            *self.pairs.entry((id, event.target)).or_insert(0) += 1;
        }
    }

    pub fn finish(self) -> CountStore {
        let n = self.index.keys.len();
        let mut pairs: Vec<((FeatureId, WordId), u64)> = self.pairs.into_iter().collect();
        pairs.sort_unstable_by_key(|p| p.0);
        let mut offsets = Vec::with_capacity(n + 1);
        let mut targets = Vec::with_capacity(pairs.len());
        let mut counts = Vec::with_capacity(pairs.len());
        let mut totals = Vec::with_capacity(n);
        offsets.push(0);
        let mut it = pairs.into_iter().peekable();
        for i in 0..n as FeatureId {
            let mut total = 0;
            while let Some(&((f, t), c)) = it.peek() {
                if f != i {
                    break;
                }
                targets.push(t);
                counts.push(c);
                total += c;
                it.next();
            }
            totals.push(total);
            offsets.push(targets.len());
        }
        CountStore {
            vocab_fingerprint: self.vocab_fingerprint,
            index: self.index,
            offsets,
            targets,
            counts,
            totals,
        }
    }
}

/// Exact feature–target counts `C_ij` and feature totals `C_i*`.
#[derive(Debug, Clone)]
pub struct CountStore {
    vocab_fingerprint: u64,
    index: KeyIndex,
    offsets: Vec<usize>,
    targets: Vec<WordId>,
    counts: Vec<u64>,
    totals: Vec<u64>,
}

impl PartialEq for CountStore {
    fn eq(&self, other: &Self) -> bool {
        self.vocab_fingerprint == other.vocab_fingerprint
            && self.index.keys == other.index.keys
            && self.offsets == other.offsets
            && self.targets == other.targets
            && self.counts == other.counts
    }
}

/// Count every feature–target pair of `events`.
pub fn accumulate<'a, I>(events: I, vocab: &Vocabulary) -> CountStore
where
    I: IntoIterator<Item = &'a Event>,
{
    let mut acc = CountAccumulator::new(vocab);
    for e in events {
        acc.add_event(e);
    }
    acc.finish()
}

/// One row of the count matrix.
pub struct Row<'a> {
    pub targets: &'a [WordId],
    pub counts: &'a [u64],
    pub total: u64,
}

impl Row<'_> {
    pub fn count(&self, target: WordId) -> u64 {
        self.targets
            .binary_search(&target)
            .map_or(0, |k| self.counts[k])
    }
}

impl CountStore {
    pub fn empty(vocab: &Vocabulary) -> Self {
        CountAccumulator::new(vocab).finish()
    }

    /// Build from explicit rows, e.g. when loading a counts file. Targets
    /// within a row may come in any order but must be unique and counts
    /// must be positive.
    pub fn from_rows(vocab: &Vocabulary, rows: Vec<(FeatureKey, Vec<(WordId, u64)>)>) -> Result<Self> {
        let mut keys = Vec::with_capacity(rows.len());
        let mut offsets = Vec::with_capacity(rows.len() + 1);
        let mut targets = Vec::new();
        let mut counts = Vec::new();
        let mut totals = Vec::with_capacity(rows.len());
        offsets.push(0);
        for (key, mut row) in rows {
            row.sort_unstable_by_key(|p| p.0);
            if row.is_empty() {
                return Err(SnmError::Input("feature with no targets".into()));
            }
            let mut total = 0u64;
            for (k, &(t, c)) in row.iter().enumerate() {
                if c == 0 {
                    return Err(SnmError::Input("zero pair count".into()));
                }
                if k > 0 && row[k - 1].0 == t {
                    return Err(SnmError::Input("duplicate feature-target pair".into()));
                }
                if !vocab.contains_id(t) {
                    return Err(SnmError::Lookup {
                        kind: "word id",
                        key: alloc::format!("{t}"),
                    });
                }
                total = total
                    .checked_add(c)
                    .ok_or_else(|| SnmError::Input("count overflow".into()))?;
                targets.push(t);
                counts.push(c);
            }
            keys.push(key);
            totals.push(total);
            offsets.push(targets.len());
        }
        Ok(CountStore {
            vocab_fingerprint: vocab.fingerprint(),
            index: KeyIndex::with_keys(keys)?,
            offsets,
            targets,
            counts,
            totals,
        })
    }

    pub fn vocab_fingerprint(&self) -> u64 {
        self.vocab_fingerprint
    }

    /// Number of distinct features.
    pub fn len(&self) -> usize {
        self.index.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.keys.is_empty()
    }

    /// Number of stored (non-zero) feature–target pairs.
    pub fn pair_count(&self) -> usize {
        self.targets.len()
    }

    pub fn lookup(&self, key: &FeatureKey) -> Option<FeatureId> {
        self.index.get(key)
    }

    pub fn key(&self, i: FeatureId) -> &FeatureKey {
        &self.index.keys[i as usize]
    }

    pub fn keys(&self) -> &[FeatureKey] {
        &self.index.keys
    }

    pub fn row(&self, i: FeatureId) -> Row<'_> {
        let (lo, hi) = (self.offsets[i as usize], self.offsets[i as usize + 1]);
        Row {
            targets: &self.targets[lo..hi],
            counts: &self.counts[lo..hi],
            total: self.totals[i as usize],
        }
    }

    /// Global position of pair `(i, j)` in the flattened pair arrays.
    pub fn pair_index(&self, i: FeatureId, j: WordId) -> Option<usize> {
        let lo = self.offsets[i as usize];
        let hi = self.offsets[i as usize + 1];
        self.targets[lo..hi].binary_search(&j).ok().map(|k| lo + k)
    }

    pub fn total(&self, i: FeatureId) -> u64 {
        self.totals[i as usize]
    }

    pub fn count(&self, i: FeatureId, j: WordId) -> u64 {
        self.pair_index(i, j).map_or(0, |k| self.counts[k])
    }

    fn check_id(&self, i: FeatureId) -> Result<()> {
        if (i as usize) < self.len() {
            Ok(())
        } else {
            Err(SnmError::Lookup {
                kind: "feature id",
                key: alloc::format!("{i}"),
            })
        }
    }

    /// `C_ij / C_i*`, zero for absent pairs.
    pub fn relative_frequency(&self, i: FeatureId, j: WordId) -> Result<f64> {
        self.check_id(i)?;
        let total = self.total(i);
        if total == 0 {
            return Err(SnmError::Domain("feature with zero total".into()));
        }
        Ok(self.count(i, j) as f64 / total as f64)
    }

    /// All `(feature, target, count)` triples in id order.
    pub fn triples(&self) -> impl Iterator<Item = (FeatureId, WordId, u64)> + '_ {
        (0..self.len() as FeatureId).flat_map(move |i| {
            let r = self.row(i);
            r.targets
                .iter()
                .zip(r.counts)
                .map(move |(&t, &c)| (i, t, c))
        })
    }

    /// Re-assign feature ids in key order.
    pub fn canonicalize(self) -> CountStore {
        let mut order: Vec<FeatureId> = (0..self.len() as FeatureId).collect();
        order.sort_unstable_by(|&a, &b| self.key(a).cmp(self.key(b)));
        self.reordered(&order)
    }

    fn reordered(&self, order: &[FeatureId]) -> CountStore {
        let mut keys = Vec::with_capacity(order.len());
        let mut offsets = Vec::with_capacity(order.len() + 1);
        let mut targets = Vec::with_capacity(self.targets.len());
        let mut counts = Vec::with_capacity(self.counts.len());
        let mut totals = Vec::with_capacity(order.len());
        offsets.push(0);
        for &i in order {
            let r = self.row(i);
            keys.push(self.key(i).clone());
            targets.extend_from_slice(r.targets);
            counts.extend_from_slice(r.counts);
            totals.push(r.total);
            offsets.push(targets.len());
        }
        CountStore {
            vocab_fingerprint: self.vocab_fingerprint,
            index: KeyIndex::with_keys(keys).expect("keys are unique"),
            offsets,
            targets,
            counts,
            totals,
        }
    }

    /// Drop features seen fewer than `min_total` times. The empty context is
    /// always kept.
    pub fn prune(&self, min_total: u64) -> CountStore {
        let keep: Vec<FeatureId> = (0..self.len() as FeatureId)
            .filter(|&i| self.total(i) >= min_total || self.key(i).is_empty_context())
            .collect();
        self.reordered(&keep)
    }
}

/// Pointwise sum of two stores over the same vocabulary. Feature ids of the
/// result follow key order.
pub fn merge(a: &CountStore, b: &CountStore) -> Result<CountStore> {
    if a.vocab_fingerprint != b.vocab_fingerprint {
        return Err(SnmError::Config(
            "cannot merge counts built on different vocabularies".into(),
        ));
    }
    let mut keys: Vec<&FeatureKey> = a.keys().iter().chain(b.keys()).collect();
    keys.sort_unstable();
    keys.dedup();

    let mut out_keys = Vec::with_capacity(keys.len());
    let mut offsets = Vec::with_capacity(keys.len() + 1);
    let mut targets = Vec::with_capacity(a.pair_count().max(b.pair_count()));
    let mut counts = Vec::with_capacity(targets.capacity());
    let mut totals = Vec::with_capacity(keys.len());
    offsets.push(0);
    let empty = Row {
        targets: &[],
        counts: &[],
        total: 0,
    };
    for key in keys {
        let ra = a.lookup(key).map_or_else(|| Row { ..empty }, |i| a.row(i));
        let rb = b.lookup(key).map_or_else(|| Row { ..empty }, |i| b.row(i));
        let (mut x, mut y) = (0, 0);
        while x < ra.targets.len() || y < rb.targets.len() {
            let ta = ra.targets.get(x).copied().unwrap_or(WordId::MAX);
            let tb = rb.targets.get(y).copied().unwrap_or(WordId::MAX);
            if ta < tb {
                targets.push(ta);
                counts.push(ra.counts[x]);
                x += 1;
            } else if tb < ta {
                targets.push(tb);
                counts.push(rb.counts[y]);
                y += 1;
            } else {
                targets.push(ta);
                counts.push(ra.counts[x] + rb.counts[y]);
                x += 1;
                y += 1;
            }
        }
        out_keys.push(key.clone());
        totals.push(ra.total + rb.total);
        offsets.push(targets.len());
    }
    Ok(CountStore {
        vocab_fingerprint: a.vocab_fingerprint,
        index: KeyIndex::with_keys(out_keys)?,
        offsets,
        targets,
        counts,
        totals,
    })
}
