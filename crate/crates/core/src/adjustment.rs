//! The adjustment function `A(i, j)`: a sum of hashed metafeature weights.
//!
//! For a feature–target pair the elementary metafeatures are, in this fixed
//! order:
//!
//! | element              | key segment        |
//! |----------------------|--------------------|
//! | feature identity     | `f=<feature key>`  |
//! | feature type         | `t=<type>`         |
//! | feature count bucket | `fc=<bucket>`      |
//! | target identity      | `w=<target word>`  |
//! | pair count bucket    | `pc=<bucket>`      |
//!
//! Counts are bucketed by `floor(log2 c)`. With double bucketing a count
//! that is not a power of two yields two elements, `floor` with weight
//! `1 - φ` and `ceil` with weight `φ`, where `φ = log2 c - floor(log2 c)`.
//! Every non-empty subset of the elements is a conjunction with key
//! `mf|<seg>|<seg>…` and weight equal to the product of its count-element
//! weights. All five elements single-bucketed give 31 conjunctions; both
//! counts double-bucketed give 127.
//!
//! Conjunction keys are hashed with [`KeyHasher`] (seeded) into a flat table
//! of `2^b` weights. Collisions are tolerated.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt::Write as _;
use core::ops::Range;

use smallvec::SmallVec;

use crate::corpus::{Vocabulary, WordId};
use crate::error::{Result, SnmError};
use crate::features::FeatureKey;
use crate::hash::KeyHasher;

/// Which elementary metafeatures are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MetafeatureConfig {
    pub feature: bool,
    pub feature_type: bool,
    pub feature_count: bool,
    pub target: bool,
    pub pair_count: bool,
    pub double_bucket_feature_count: bool,
    pub double_bucket_pair_count: bool,
}

impl Default for MetafeatureConfig {
    fn default() -> Self {
        MetafeatureConfig {
            feature: true,
            feature_type: true,
            feature_count: true,
            target: true,
            pair_count: true,
            double_bucket_feature_count: false,
            double_bucket_pair_count: true,
        }
    }
}

impl MetafeatureConfig {
    pub fn all_single() -> Self {
        MetafeatureConfig {
            double_bucket_pair_count: false,
            ..Self::default()
        }
    }

    pub fn all_double() -> Self {
        MetafeatureConfig {
            double_bucket_feature_count: true,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.feature || self.feature_type || self.feature_count || self.target || self.pair_count) {
            return Err(SnmError::Config("no metafeature enabled".into()));
        }
        Ok(())
    }

    /// Bit flags, in element order, for serialization.
    pub fn to_bits(&self) -> u8 {
        [
            self.feature,
            self.feature_type,
            self.feature_count,
            self.target,
            self.pair_count,
            self.double_bucket_feature_count,
            self.double_bucket_pair_count,
        ]
        .iter()
        .enumerate()
        .fold(0, |acc, (k, &on)| acc | (u8::from(on) << k))
    }

    pub fn from_bits(bits: u8) -> Result<Self> {
        if bits >> 7 != 0 {
            return Err(SnmError::Input("unknown metafeature flag bits".into()));
        }
        let on = |k: u8| bits & (1 << k) != 0;
        let cfg = MetafeatureConfig {
            feature: on(0),
            feature_type: on(1),
            feature_count: on(2),
            target: on(3),
            pair_count: on(4),
            double_bucket_feature_count: on(5),
            double_bucket_pair_count: on(6),
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bucket {
    pub bucket: u32,
    pub weight: f64,
}

/// Log2 bucketing of a positive count. Bucket weights always sum to 1.
pub fn bucketize(count: u64, double: bool) -> Result<SmallVec<[Bucket; 2]>> {
    if count < 1 {
        return Err(SnmError::Domain("count must be at least 1".into()));
    }
    let floor = 63 - count.leading_zeros();
    let mut out = SmallVec::new();
    if !double || count.is_power_of_two() {
        out.push(Bucket {
            bucket: floor,
            weight: 1.0,
        });
        return Ok(out);
    }
    let frac = libm::log2(count as f64) - f64::from(floor);
    out.push(Bucket {
        bucket: floor,
        weight: 1.0 - frac,
    });
    out.push(Bucket {
        bucket: floor + 1,
        weight: frac,
    });
    Ok(out)
}

/// The inputs that metafeatures are built from.
#[derive(Debug, Clone, Copy)]
pub struct PairDescriptor<'a> {
    pub feature_key: &'a str,
    pub feature_type: &'a str,
    pub target: &'a str,
    /// `C_i*` as seen by the caller; leave-one-out passes decremented counts.
    pub feature_count: u64,
    pub pair_count: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightedMetafeature {
    pub key: String,
    pub weight: f64,
}

/// Key segments (with leading `|`) stored back to back in one buffer.
#[derive(Debug, Default)]
struct Elements {
    buf: String,
    spans: SmallVec<[(Range<usize>, f64); 7]>,
}

impl Elements {
    fn clear(&mut self) {
        self.buf.clear();
        self.spans.clear();
    }

    fn push(&mut self, weight: f64, write: impl FnOnce(&mut String)) {
        let start = self.buf.len();
        write(&mut self.buf);
        self.spans.push((start..self.buf.len(), weight));
    }

    fn segment(&self, k: usize) -> &[u8] {
        &self.buf.as_bytes()[self.spans[k].0.clone()]
    }

    fn build(&mut self, d: &PairDescriptor<'_>, cfg: &MetafeatureConfig) -> Result<()> {
        self.clear();
        if cfg.feature {
            self.push(1.0, |b| {
                b.push_str("|f=");
                b.push_str(d.feature_key);
            });
        }
        if cfg.feature_type {
            self.push(1.0, |b| {
                b.push_str("|t=");
                b.push_str(d.feature_type);
            });
        }
        if cfg.feature_count {
            for bk in bucketize(d.feature_count, cfg.double_bucket_feature_count)? {
                self.push(bk.weight, |b| {
                    let _ = write!(b, "|fc={}", bk.bucket);
                });
            }
        }
        if cfg.target {
            self.push(1.0, |b| {
                b.push_str("|w=");
                b.push_str(d.target);
            });
        }
        if cfg.pair_count {
            for bk in bucketize(d.pair_count, cfg.double_bucket_pair_count)? {
                self.push(bk.weight, |b| {
                    let _ = write!(b, "|pc={}", bk.bucket);
                });
            }
        }
        Ok(())
    }

    /// Visit every non-empty subset of the elements, in lexicographic order
    /// of element positions, with the hasher state after its key.
    fn for_each_conjunction(&self, root: KeyHasher, emit: &mut impl FnMut(KeyHasher, f64)) {
        self.descend(root, 1.0, 0, emit);
    }

    fn descend(&self, state: KeyHasher, weight: f64, from: usize, emit: &mut impl FnMut(KeyHasher, f64)) {
        for k in from..self.spans.len() {
            let s = state.with(self.segment(k));
            let w = weight * self.spans[k].1;
            emit(s, w);
            self.descend(s, w, k + 1, emit);
        }
    }
}

fn check_counts(d: &PairDescriptor<'_>) -> Result<()> {
    if d.pair_count > d.feature_count {
        return Err(SnmError::Domain("pair count exceeds feature count".into()));
    }
    Ok(())
}

/// Every weighted conjunction key of the pair.
pub fn enumerate_metafeatures(
    d: &PairDescriptor<'_>,
    cfg: &MetafeatureConfig,
) -> Result<Vec<WeightedMetafeature>> {
    cfg.validate()?;
    check_counts(d)?;
    let mut el = Elements::default();
    el.build(d, cfg)?;
    let mut out = Vec::with_capacity((1 << el.spans.len()) - 1);
    let mut prefix: Vec<usize> = Vec::new();
    fn walk(el: &Elements, from: usize, weight: f64, prefix: &mut Vec<usize>, out: &mut Vec<WeightedMetafeature>) {
        for k in from..el.spans.len() {
            prefix.push(k);
            let w = weight * el.spans[k].1;
            let mut key = String::from("mf");
            for &p in prefix.iter() {
                key.push_str(&el.buf[el.spans[p].0.clone()]);
            }
            out.push(WeightedMetafeature { key, weight: w });
            walk(el, k + 1, w, prefix, out);
            prefix.pop();
        }
    }
    walk(&el, 0, 1.0, &mut prefix, &mut out);
    Ok(out)
}

/// Table geometry and hash seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TableLayout {
    pub bits: u8,
    pub seed: u64,
}

impl TableLayout {
    pub const MAX_BITS: u8 = 40;

    pub fn new(bits: u8, seed: u64) -> Result<Self> {
        if bits == 0 || bits > Self::MAX_BITS {
            return Err(SnmError::Config(alloc::format!(
                "table bits must be in 1..={}",
                Self::MAX_BITS
            )));
        }
        Ok(TableLayout { bits, seed })
    }

    pub fn len(&self) -> usize {
        1usize << self.bits
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    #[inline]
    pub fn slot_of(&self, state: &KeyHasher) -> usize {
        (state.finish() & ((1u64 << self.bits) - 1)) as usize
    }

    pub fn slot(&self, key: &str) -> usize {
        self.slot_of(&KeyHasher::new(self.seed).with(key.as_bytes()))
    }

    fn root(&self) -> KeyHasher {
        KeyHasher::new(self.seed).with(b"mf")
    }
}

/// Read access to metafeature weights by slot.
pub trait SlotWeights {
    fn weight(&self, slot: usize) -> f64;
}

/// Additive updates to metafeature weights by slot.
pub trait SlotUpdate: SlotWeights {
    fn add(&mut self, slot: usize, delta: f64);
}

impl SlotWeights for [f64] {
    #[inline]
    fn weight(&self, slot: usize) -> f64 {
        self[slot]
    }
}

impl SlotWeights for Vec<f64> {
    #[inline]
    fn weight(&self, slot: usize) -> f64 {
        self[slot]
    }
}

impl SlotUpdate for Vec<f64> {
    #[inline]
    fn add(&mut self, slot: usize, delta: f64) {
        self[slot] += delta;
    }
}

/// Flat array of `2^b` metafeature weights, initially zero.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightTable {
    layout: TableLayout,
    weights: Vec<f64>,
}

impl WeightTable {
    pub fn new(layout: TableLayout) -> Self {
        WeightTable {
            layout,
            weights: vec![0.0; layout.len()],
        }
    }

    pub fn from_weights(layout: TableLayout, weights: Vec<f64>) -> Result<Self> {
        if weights.len() != layout.len() {
            return Err(SnmError::Input("weight array length does not match table bits".into()));
        }
        Ok(WeightTable { layout, weights })
    }

    pub fn layout(&self) -> TableLayout {
        self.layout
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.weights
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.weights
    }

    pub fn into_weights(self) -> Vec<f64> {
        self.weights
    }
}

impl SlotWeights for WeightTable {
    #[inline]
    fn weight(&self, slot: usize) -> f64 {
        self.weights[slot]
    }
}

impl SlotUpdate for WeightTable {
    #[inline]
    fn add(&mut self, slot: usize, delta: f64) {
        self.weights[slot] += delta;
    }
}

/// A hashed metafeature occurrence: table slot and bucket weight.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Slot {
    pub index: usize,
    pub weight: f64,
}

/// Slots of every conjunction of the pair, appended to `out`.
pub fn pair_slots(
    d: &PairDescriptor<'_>,
    cfg: &MetafeatureConfig,
    layout: TableLayout,
    out: &mut Vec<Slot>,
) -> Result<()> {
    cfg.validate()?;
    check_counts(d)?;
    let mut el = Elements::default();
    el.build(d, cfg)?;
    el.for_each_conjunction(layout.root(), &mut |s, w| {
        out.push(Slot {
            index: layout.slot_of(&s),
            weight: w,
        })
    });
    Ok(())
}

/// `Σ_k weight_k · θ[slot_k]`.
pub fn sum_slots<W: SlotWeights + ?Sized>(slots: &[Slot], weights: &W) -> f64 {
    slots.iter().map(|s| s.weight * weights.weight(s.index)).sum()
}

/// `A(i, j)` for one pair.
pub fn adjustment<W: SlotWeights + ?Sized>(
    d: &PairDescriptor<'_>,
    weights: &W,
    layout: TableLayout,
    cfg: &MetafeatureConfig,
) -> Result<f64> {
    let mut slots = Vec::new();
    pair_slots(d, cfg, layout, &mut slots)?;
    Ok(sum_slots(&slots, weights))
}

/// Computes metafeature slots for vocabulary-relative pairs, reusing its
/// string buffers across calls.
#[derive(Debug)]
pub struct Adjuster<'a> {
    vocab: &'a Vocabulary,
    cfg: MetafeatureConfig,
    layout: TableLayout,
    key_buf: String,
    type_buf: String,
    elements: Elements,
}

impl<'a> Adjuster<'a> {
    pub fn new(vocab: &'a Vocabulary, cfg: MetafeatureConfig, layout: TableLayout) -> Result<Self> {
        cfg.validate()?;
        Ok(Adjuster {
            vocab,
            cfg,
            layout,
            key_buf: String::new(),
            type_buf: String::new(),
            elements: Elements::default(),
        })
    }

    pub fn layout(&self) -> TableLayout {
        self.layout
    }

    pub fn config(&self) -> &MetafeatureConfig {
        &self.cfg
    }

    /// Clear `out` and fill it with the slots of `(key, target)` under the
    /// given counts. Counts must satisfy `1 <= pair_count <= feature_count`.
    pub fn slots(
        &mut self,
        key: &FeatureKey,
        target: WordId,
        feature_count: u64,
        pair_count: u64,
        out: &mut Vec<Slot>,
    ) {
        out.clear();
        debug_assert!(pair_count >= 1 && pair_count <= feature_count);
        self.key_buf.clear();
        self.type_buf.clear();
        if self.cfg.feature {
            key.render_into(self.vocab, &mut self.key_buf);
        }
        if self.cfg.feature_type {
            key.type_into(&mut self.type_buf);
        }
        let d = PairDescriptor {
            feature_key: &self.key_buf,
            feature_type: &self.type_buf,
            target: self.vocab.word(target),
            feature_count,
            pair_count,
        };
        self.elements
            .build(&d, &self.cfg)
            .expect("counts are positive");
        let layout = self.layout;
        self.elements.for_each_conjunction(layout.root(), &mut |s, w| {
            out.push(Slot {
                index: layout.slot_of(&s),
                weight: w,
            })
        });
    }

    /// Descriptor strings for a pair, for inspection.
    pub fn describe(&self, key: &FeatureKey, target: WordId) -> (String, String, String) {
        (
            key.render(self.vocab),
            key.type_name(),
            String::from(self.vocab.word(target)),
        )
    }
}
