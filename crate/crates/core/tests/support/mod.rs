//! Independent reference implementations used by the property tests and the
//! acceptance suite. Everything here works on plain strings and brute-force
//! enumeration so that it shares no code paths with the library beyond the
//! key hash.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use snm_core::adjustment::{MetafeatureConfig, TableLayout, WeightTable};
use snm_core::corpus::{build_vocabulary, Sentence, Vocabulary};
use snm_core::counts::accumulate;
use snm_core::features::{make_events, Template, TemplateSet};
use snm_core::model::SnmModel;
use snm_core::training::EncodedEvents;

/// `(key, type)` pairs of every feature for the prediction at `p`.
pub fn brute_features(words: &[&str], p: usize, templates: &[Template]) -> BTreeSet<(String, String)> {
    let mut out = BTreeSet::new();
    out.insert(("[]".to_string(), "ngram:1".to_string()));
    for t in templates {
        match t {
            Template::NGram { order } => {
                for k in 0..*order as usize {
                    if k <= p {
                        out.insert((format!("[{}]", words[p - k..p].join(" ")), format!("ngram:{}", k + 1)));
                    }
                }
            }
            Template::Skip(c) => {
                for r in 0..=p {
                    for s in 0..=p {
                        for a in 0..=p {
                            if r + s + a > p || r == 0 || s == 0 {
                                continue;
                            }
                            let (r32, s32, a32) = (r as u32, s as u32, a as u32);
                            if !(c.remote.contains(r32)
                                && c.skip.contains(s32)
                                && c.adjacent.contains(a32)
                                && c.context.contains(r32 + a32))
                            {
                                continue;
                            }
                            let remote = words[p - a - s - r..p - a - s].join(" ");
                            let gap = if c.tie_skips { "*".to_string() } else { s.to_string() };
                            let mut key = format!("[{remote} skip-{gap}");
                            for w in &words[p - a..p] {
                                key.push(' ');
                                key.push_str(w);
                            }
                            key.push(']');
                            out.insert((key, format!("skip:{r},{gap},{a}")));
                        }
                    }
                }
            }
        }
    }
    out
}

fn buckets(c: u64, double: bool) -> Vec<(u32, f64)> {
    let mut floor = 0u32;
    while (1u64 << (floor + 1)) <= c {
        floor += 1;
    }
    let frac = (c as f64).log2() - floor as f64;
    if !double || frac == 0.0 {
        vec![(floor, 1.0)]
    } else {
        vec![(floor, 1.0 - frac), (floor + 1, frac)]
    }
}

/// Every non-empty subset of the metafeature elements, as `(key, weight)`.
pub fn conjunctions(
    cfg: &MetafeatureConfig,
    key: &str,
    ty: &str,
    target: &str,
    fc: u64,
    pc: u64,
) -> Vec<(String, f64)> {
    let mut el: Vec<(String, f64)> = Vec::new();
    if cfg.feature {
        el.push((format!("f={key}"), 1.0));
    }
    if cfg.feature_type {
        el.push((format!("t={ty}"), 1.0));
    }
    if cfg.feature_count {
        for (b, w) in buckets(fc, cfg.double_bucket_feature_count) {
            el.push((format!("fc={b}"), w));
        }
    }
    if cfg.target {
        el.push((format!("w={target}"), 1.0));
    }
    if cfg.pair_count {
        for (b, w) in buckets(pc, cfg.double_bucket_pair_count) {
            el.push((format!("pc={b}"), w));
        }
    }
    let mut out = Vec::new();
    for mask in 1u32..(1 << el.len()) {
        let mut k = String::from("mf");
        let mut w = 1.0;
        for (bit, (seg, sw)) in el.iter().enumerate() {
            if mask & (1 << bit) != 0 {
                k.push('|');
                k.push_str(seg);
                w *= sw;
            }
        }
        out.push((k, w));
    }
    out
}

/// Feature–target counts keyed by strings.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct StringCounts {
    pub types: BTreeMap<String, String>,
    pub pairs: BTreeMap<String, BTreeMap<String, u64>>,
}

impl StringCounts {
    pub fn add(&mut self, features: &BTreeSet<(String, String)>, target: &str) {
        for (k, t) in features {
            self.types.insert(k.clone(), t.clone());
            *self.pairs.entry(k.clone()).or_default().entry(target.to_string()).or_insert(0) += 1;
        }
    }

    pub fn total(&self, key: &str) -> u64 {
        self.pairs.get(key).map_or(0, |r| r.values().sum())
    }

    pub fn count(&self, key: &str, target: &str) -> u64 {
        self.pairs.get(key).and_then(|r| r.get(target)).copied().unwrap_or(0)
    }
}

#[derive(Debug, Clone)]
pub struct StringEvent {
    pub features: BTreeSet<(String, String)>,
    pub target: String,
}

/// A small random training setup with its brute-force counterpart.
pub struct Instance {
    pub vocab: Vocabulary,
    pub words: Vec<String>,
    pub templates: TemplateSet,
    pub sentences: Vec<Sentence>,
    pub events: Vec<StringEvent>,
    pub counts: StringCounts,
    pub cfg: MetafeatureConfig,
    pub layout: TableLayout,
    pub model: SnmModel,
    pub encoded: EncodedEvents,
}

pub const INSTANCE_TEMPLATES: [&str; 3] = [
    "ngram order=3\nskip r=1..2 s=1..2 a=0..1 ra=1..3 tie=0",
    "ngram order=2\nskip r=1 s=1..* a=0..2 tie=1",
    "ngram order=4",
];

/// Random corpus with `|V| <= 50` and at most `max_events` events, random
/// templates, metafeature config and weights.
pub fn random_instance(seed: u64, max_events: usize) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let distinct = rng.gen_range(3..=20);
    let mut lines = Vec::new();
    let mut events = 0;
    loop {
        let len = rng.gen_range(0..=7);
        if events + len + 1 > max_events {
            break;
        }
        events += len + 1;
        // skewed word choice so that some pairs repeat
        let line: Vec<String> = (0..len)
            .map(|_| {
                let x: f64 = rng.gen();
                format!("w{}", (x * x * distinct as f64) as usize)
            })
            .collect();
        lines.push(line.join(" "));
    }
    let min_count = if rng.gen_bool(0.3) { 2 } else { 1 };
    let vocab = build_vocabulary(lines.iter().map(String::as_str), min_count).unwrap();
    let templates = TemplateSet::parse(INSTANCE_TEMPLATES.choose(&mut rng).unwrap()).unwrap();
    let cfg = match rng.gen_range(0..4) {
        0 => MetafeatureConfig::default(),
        1 => MetafeatureConfig::all_single(),
        2 => MetafeatureConfig::all_double(),
        _ => loop {
            let c = MetafeatureConfig::from_bits(rng.gen_range(0..128)).ok();
            if let Some(c) = c {
                break c;
            }
        },
    };
    let layout = TableLayout::new(10, rng.gen()).unwrap();
    let theta: Vec<f64> = (0..layout.len()).map(|_| rng.gen_range(-0.3..0.3)).collect();
    build_instance(vocab, &lines, templates, cfg, layout, theta)
}

pub fn build_instance(
    vocab: Vocabulary,
    lines: &[String],
    templates: TemplateSet,
    cfg: MetafeatureConfig,
    layout: TableLayout,
    theta: Vec<f64>,
) -> Instance {
    let words: Vec<String> = (0..vocab.len() as u32).map(|i| vocab.word(i).to_string()).collect();
    let sentences: Vec<Sentence> = lines.iter().map(|l| vocab.tokenize(l)).collect();
    let mut counts = StringCounts::default();
    let mut events = Vec::new();
    for s in &sentences {
        let toks: Vec<&str> = s.iter().map(|&w| words[w as usize].as_str()).collect();
        for p in 1..toks.len() {
            let features = brute_features(&toks, p, templates.templates());
            counts.add(&features, toks[p]);
            events.push(StringEvent {
                features,
                target: toks[p].to_string(),
            });
        }
    }
    let lib_events: Vec<_> = sentences.iter().flat_map(|s| make_events(s, &templates).unwrap()).collect();
    let store = accumulate(&lib_events, &vocab);
    let encoded = EncodedEvents::from_sentences(&sentences, &templates, &store).unwrap();
    let table = WeightTable::from_weights(layout, theta).unwrap();
    let mut model = SnmModel::new(vocab.clone(), templates.clone(), cfg, store, table).unwrap();
    model.finalize();
    Instance {
        vocab,
        words,
        templates,
        sentences,
        events,
        counts,
        cfg,
        layout,
        model,
        encoded,
    }
}

/// Brute-force model over string counts: every observed pair's conjunction
/// slots, precomputed once so the loss can be re-evaluated cheaply.
pub struct Oracle<'a> {
    pub inst: &'a Instance,
    /// `(feature key, target) -> [(slot, weight)]` at the full counts.
    pub pair_slots: BTreeMap<(String, String), Vec<(usize, f64)>>,
}

impl<'a> Oracle<'a> {
    pub fn new(inst: &'a Instance) -> Self {
        let mut pair_slots = BTreeMap::new();
        for (k, row) in &inst.counts.pairs {
            let ty = &inst.counts.types[k];
            let total = inst.counts.total(k);
            for (t, &c) in row {
                pair_slots.insert((k.clone(), t.clone()), self_slots(inst, k, ty, t, total, c));
            }
        }
        Oracle { inst, pair_slots }
    }

    /// `M_ij` at the full counts; zero for unobserved pairs.
    pub fn m(&self, theta: &[f64], key: &str, target: &str) -> f64 {
        let c = self.inst.counts.count(key, target);
        if c == 0 {
            return 0.0;
        }
        let a: f64 = self.pair_slots[&(key.to_string(), target.to_string())]
            .iter()
            .map(|&(s, w)| w * theta[s])
            .sum();
        a.exp() * c as f64 / self.inst.counts.total(key) as f64
    }

    pub fn y(&self, theta: &[f64], e: &StringEvent, target: &str) -> f64 {
        e.features.iter().map(|(k, _)| self.m(theta, k, target)).sum()
    }

    /// `Σ_e (Σ_{i ∈ f_e} Σ_u M_iu - ln y_t)`.
    pub fn total_loss(&self, theta: &[f64]) -> f64 {
        let mut row_sum: BTreeMap<&str, f64> = BTreeMap::new();
        for (k, row) in &self.inst.counts.pairs {
            row_sum.insert(k, row.keys().map(|t| self.m(theta, k, t)).sum());
        }
        self.inst
            .events
            .iter()
            .map(|e| {
                let first: f64 = e.features.iter().map(|(k, _)| row_sum[k.as_str()]).sum();
                first - self.y(theta, e, &e.target).ln()
            })
            .sum()
    }

    /// Per-example gradient `f_i M_iu (1 - t_u / y_u)` summed over every
    /// event, every active feature and every vocabulary word, pushed onto
    /// the slots of each conjunction.
    pub fn enumerated_gradient(&self, theta: &[f64]) -> Vec<f64> {
        let mut g = vec![0.0; theta.len()];
        for e in &self.inst.events {
            let yt = self.y(theta, e, &e.target);
            for (k, _) in &e.features {
                for u in &self.inst.words {
                    let m = self.m(theta, k, u);
                    if m == 0.0 {
                        continue;
                    }
                    let t = if *u == e.target { 1.0 } else { 0.0 };
                    let d = m * (1.0 - t / yt);
                    for &(s, w) in &self.pair_slots[&(k.clone(), u.clone())] {
                        g[s] += w * d;
                    }
                }
            }
        }
        g
    }

    /// Central finite difference of [`Oracle::total_loss`] in one slot.
    pub fn finite_difference(&self, theta: &[f64], slot: usize, h: f64) -> f64 {
        let mut t = theta.to_vec();
        t[slot] = theta[slot] + h;
        let up = self.total_loss(&t);
        t[slot] = theta[slot] - h;
        let down = self.total_loss(&t);
        (up - down) / (2.0 * h)
    }
}

fn self_slots(inst: &Instance, key: &str, ty: &str, target: &str, fc: u64, pc: u64) -> Vec<(usize, f64)> {
    conjunctions(&inst.cfg, key, ty, target, fc, pc)
        .into_iter()
        .map(|(k, w)| (inst.layout.slot(&k), w))
        .collect()
}

/// `e^{A} pc / fc` with the conjunctions built from the given counts.
pub fn entry_at(inst: &Instance, theta: &[f64], key: &str, ty: &str, target: &str, fc: u64, pc: u64) -> f64 {
    if fc == 0 || pc == 0 {
        return 0.0;
    }
    let a: f64 = self_slots(inst, key, ty, target, fc, pc).iter().map(|&(s, w)| w * theta[s]).sum();
    a.exp() * pc as f64 / fc as f64
}

/// Leave-one-out gradient of one positive pair, computed by rebuilding the
/// counts without event `e`. `None` when the feature disappears from the
/// rebuilt counts.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RebuiltGradient {
    pub negative: f64,
    pub positive: f64,
    /// Number of negative examples `C'_i* - C'_ij` of the feature.
    pub negatives: u64,
    /// Gradient of one negative example.
    pub per_negative: f64,
}

pub fn rebuilt_counts(inst: &Instance, skip: usize) -> StringCounts {
    let mut c = StringCounts::default();
    for (k, e) in inst.events.iter().enumerate() {
        if k != skip {
            c.add(&e.features, &e.target);
        }
    }
    c
}

pub fn loo_by_rebuild(
    inst: &Instance,
    theta: &[f64],
    rebuilt: &StringCounts,
    event: &StringEvent,
    key: &str,
) -> Option<RebuiltGradient> {
    let fc = rebuilt.total(key);
    if fc == 0 {
        return None;
    }
    let t = &event.target;
    let ty = &inst.counts.types[key];
    // y' over the event's features under the rebuilt counts
    let y_loo: f64 = event
        .features
        .iter()
        .map(|(k, kt)| entry_at(inst, theta, k, kt, t, rebuilt.total(k), rebuilt.count(k, t)))
        .sum();
    let m_loo = entry_at(inst, theta, key, ty, t, fc, rebuilt.count(key, t));
    let positive = if m_loo > 0.0 { m_loo * (1.0 - 1.0 / y_loo) } else { 0.0 };
    // negatives keep the full pair count and only lose the event from C_i*
    let full_pc = inst.counts.count(key, t);
    let negatives = fc - rebuilt.count(key, t);
    let per_negative = entry_at(inst, theta, key, ty, t, fc, full_pc);
    let negative = negatives as f64 * per_negative / full_pc as f64;
    Some(RebuiltGradient {
        negative,
        positive,
        negatives,
        per_negative,
    })
}

/// `|a - b| / max(|a|, |b|)`, zero when both are zero.
pub fn rel_err(a: f64, b: f64) -> f64 {
    let d = a.abs().max(b.abs());
    if d == 0.0 {
        0.0
    } else {
        (a - b).abs() / d
    }
}
