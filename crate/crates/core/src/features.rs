//! Context feature extraction: n-grams and (remote, skip, adjacent)
//! skip-grams taken strictly left of the predicted word.
//!
//! Keys render as `[w1 w2 w3]` for n-grams and `[remote… skip-<s|*>
//! adjacent…]` for skip-grams; the zero-length context `[]` is the unigram
//! feature and is part of every event.

use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt::{self, Write as _};
use core::str::FromStr;

use smallvec::SmallVec;

use crate::corpus::{Sentence, Vocabulary, WordId};
use crate::error::{Result, SnmError};

pub type Words = SmallVec<[WordId; 4]>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SkipLen {
    Exact(u32),
    /// The skip length is replaced by a wildcard so that placements with
    /// different skips share counts.
    Tied,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Shape {
    NGram,
    Skip { remote: u8, skip: SkipLen },
}

/// Compact, vocabulary-relative form of a feature key.
///
/// Ordering is by shape, then word ids; this is the canonical order used for
/// the features of an event.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct FeatureKey {
    shape: Shape,
    words: Words,
}

impl FeatureKey {
    pub fn empty() -> Self {
        FeatureKey {
            shape: Shape::NGram,
            words: Words::new(),
        }
    }

    pub fn ngram(words: &[WordId]) -> Self {
        FeatureKey {
            shape: Shape::NGram,
            words: Words::from_slice(words),
        }
    }

    pub fn skip(remote: &[WordId], skip: SkipLen, adjacent: &[WordId]) -> Self {
        let mut words = Words::from_slice(remote);
        words.extend_from_slice(adjacent);
        FeatureKey {
            shape: Shape::Skip {
                remote: remote.len() as u8,
                skip,
            },
            words,
        }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn words(&self) -> &[WordId] {
        &self.words
    }

    pub fn is_empty_context(&self) -> bool {
        self.shape == Shape::NGram && self.words.is_empty()
    }

    /// Append the canonical key string to `out`.
    pub fn render_into(&self, vocab: &Vocabulary, out: &mut String) {
        out.push('[');
        let (remote, skip) = match self.shape {
            Shape::NGram => (self.words.len(), None),
            Shape::Skip { remote, skip } => (remote as usize, Some(skip)),
        };
        for (k, &w) in self.words[..remote].iter().enumerate() {
            if k > 0 {
                out.push(' ');
            }
            out.push_str(vocab.word(w));
        }
        if let Some(skip) = skip {
            let _ = match skip {
                SkipLen::Exact(s) => write!(out, " skip-{s}"),
                SkipLen::Tied => write!(out, " skip-*"),
            };
            for &w in &self.words[remote..] {
                out.push(' ');
                out.push_str(vocab.word(w));
            }
        }
        out.push(']');
    }

    pub fn render(&self, vocab: &Vocabulary) -> String {
        let mut s = String::new();
        self.render_into(vocab, &mut s);
        s
    }

    /// Append the feature-type descriptor, e.g. `ngram:3` or `skip:1,2,3`.
    pub fn type_into(&self, out: &mut String) {
        let _ = match self.shape {
            Shape::NGram => write!(out, "ngram:{}", self.words.len() + 1),
            Shape::Skip { remote, skip } => {
                let adjacent = self.words.len() - remote as usize;
                match skip {
                    SkipLen::Exact(s) => write!(out, "skip:{remote},{s},{adjacent}"),
                    SkipLen::Tied => write!(out, "skip:{remote},*,{adjacent}"),
                }
            }
        };
    }

    pub fn type_name(&self) -> String {
        let mut s = String::new();
        self.type_into(&mut s);
        s
    }

    /// Parse a canonical key string. Every word must be in `vocab`.
    pub fn parse(key: &str, vocab: &Vocabulary) -> Result<Self> {
        let bad = || SnmError::Input(alloc::format!("malformed feature key {key:?}"));
        let inner = key
            .strip_prefix('[')
            .and_then(|k| k.strip_suffix(']'))
            .ok_or_else(bad)?;
        let mut words = Words::new();
        let mut shape = Shape::NGram;
        for tok in inner.split(' ').filter(|t| !t.is_empty()) {
            if let Some(skip) = parse_skip_marker(tok) {
                if shape != Shape::NGram {
                    return Err(bad());
                }
                shape = Shape::Skip {
                    remote: u8::try_from(words.len()).map_err(|_| bad())?,
                    skip,
                };
                continue;
            }
            let id = vocab.id(tok).ok_or_else(|| SnmError::Lookup {
                kind: "word",
                key: tok.to_string(),
            })?;
            words.push(id);
        }
        if let Shape::Skip { remote, .. } = shape {
            if remote == 0 {
                return Err(bad());
            }
        }
        Ok(FeatureKey { shape, words })
    }
}

fn parse_skip_marker(tok: &str) -> Option<SkipLen> {
    let rest = tok.strip_prefix("skip-")?;
    if rest == "*" {
        return Some(SkipLen::Tied);
    }
    if rest.is_empty() || !rest.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    rest.parse().ok().map(SkipLen::Exact)
}

/// Inclusive count range; `max == None` is unbounded.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Span {
    pub min: u32,
    pub max: Option<u32>,
}

impl Span {
    pub const fn new(min: u32, max: u32) -> Self {
        Span {
            min,
            max: Some(max),
        }
    }

    pub const fn at_least(min: u32) -> Self {
        Span { min, max: None }
    }

    pub fn contains(&self, v: u32) -> bool {
        v >= self.min && self.max.is_none_or(|m| v <= m)
    }

    /// Largest value not above `limit`.
    fn upper(&self, limit: u32) -> u32 {
        self.max.map_or(limit, |m| m.min(limit))
    }
}

impl fmt::Display for Span {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.max {
            Some(m) if m == self.min => write!(f, "{m}"),
            Some(m) => write!(f, "{}..{m}", self.min),
            None => write!(f, "{}..*", self.min),
        }
    }
}

impl FromStr for Span {
    type Err = SnmError;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || SnmError::Config(alloc::format!("bad range {s:?}"));
        let num = |t: &str| t.parse::<u32>().map_err(|_| bad());
        match s.split_once("..") {
            None => Ok(Span::new(num(s)?, num(s)?)),
            Some((lo, "*" | "")) => Ok(Span::at_least(num(lo)?)),
            Some((lo, hi)) => Ok(Span::new(num(lo)?, num(hi)?)),
        }
    }
}

/// Constraints on the skip-gram placements extracted for a target.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SkipGramConfig {
    pub remote: Span,
    pub skip: Span,
    pub adjacent: Span,
    /// Bounds on the number of context words, remote plus adjacent.
    pub context: Span,
    pub tie_skips: bool,
}

impl Default for SkipGramConfig {
    fn default() -> Self {
        SkipGramConfig {
            remote: Span::at_least(1),
            skip: Span::at_least(1),
            adjacent: Span::at_least(0),
            context: Span::at_least(1),
            tie_skips: false,
        }
    }
}

impl SkipGramConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |m: &str| Err(SnmError::Config(alloc::format!("skip-gram config: {m}")));
        for (name, span) in [
            ("r", self.remote),
            ("s", self.skip),
            ("a", self.adjacent),
            ("ra", self.context),
        ] {
            if span.max.is_some_and(|m| m < span.min) {
                return err(&alloc::format!("{name} min exceeds max"));
            }
        }
        if self.remote.min == 0 {
            return err("at least one remote word is required");
        }
        if self.remote.max.is_some_and(|m| m > u8::MAX as u32) {
            return err("remote span above 255");
        }
        let lowest = self.remote.min + self.adjacent.min;
        let highest = match (self.remote.max, self.adjacent.max) {
            (Some(r), Some(a)) => Some(r + a),
            _ => None,
        };
        if self.context.max.is_some_and(|m| m < lowest)
            || highest.is_some_and(|h| h < self.context.min)
        {
            return err("no (r, a) pair satisfies the ra range");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Template {
    /// Contexts of length 0 through `order - 1`.
    NGram { order: u32 },
    Skip(SkipGramConfig),
}

impl fmt::Display for Template {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Template::NGram { order } => write!(f, "ngram order={order}"),
            Template::Skip(c) => write!(
                f,
                "skip r={} s={} a={} ra={} tie={}",
                c.remote,
                c.skip,
                c.adjacent,
                c.context,
                u8::from(c.tie_skips)
            ),
        }
    }
}

impl FromStr for Template {
    type Err = SnmError;

    fn from_str(line: &str) -> Result<Self> {
        let mut parts = line.split_whitespace();
        let kind = parts.next().unwrap_or("");
        let mut fields = Vec::new();
        for p in parts {
            let (k, v) = p
                .split_once('=')
                .ok_or_else(|| SnmError::Config(alloc::format!("bad field {p:?}")))?;
            fields.push((k, v));
        }
        let unknown = |k: &str| Err(SnmError::Config(alloc::format!("unknown field {k:?} in {line:?}")));
        match kind {
            "ngram" => {
                let mut order = None;
                for (k, v) in fields {
                    match k {
                        "order" => {
                            order = Some(v.parse::<u32>().map_err(|_| {
                                SnmError::Config(alloc::format!("bad order {v:?}"))
                            })?)
                        }
                        _ => return unknown(k),
                    }
                }
                let order =
                    order.ok_or_else(|| SnmError::Config("ngram template needs order=K".into()))?;
                if order < 1 {
                    return Err(SnmError::Config("ngram order must be at least 1".into()));
                }
                Ok(Template::NGram { order })
            }
            "skip" => {
                let mut c = SkipGramConfig::default();
                for (k, v) in fields {
                    match k {
                        "r" => c.remote = v.parse()?,
                        "s" => c.skip = v.parse()?,
                        "a" => c.adjacent = v.parse()?,
                        "ra" => c.context = v.parse()?,
                        "tie" => {
                            c.tie_skips = match v {
                                "0" => false,
                                "1" => true,
                                _ => return Err(SnmError::Config(alloc::format!("bad tie {v:?}"))),
                            }
                        }
                        _ => return unknown(k),
                    }
                }
                c.validate()?;
                Ok(Template::Skip(c))
            }
            _ => Err(SnmError::Config(alloc::format!("unknown template {line:?}"))),
        }
    }
}

/// An ordered set of feature templates.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TemplateSet(Vec<Template>);

impl TemplateSet {
    pub fn new(templates: Vec<Template>) -> Result<Self> {
        for t in &templates {
            if let Template::Skip(c) = t {
                c.validate()?;
            }
        }
        Ok(TemplateSet(templates))
    }

    /// Parse the template file format: one template per line, `#` comments.
    pub fn parse(text: &str) -> Result<Self> {
        let templates = text
            .lines()
            .map(|l| l.split('#').next().unwrap_or("").trim())
            .filter(|l| !l.is_empty())
            .map(str::parse)
            .collect::<Result<Vec<_>>>()?;
        Ok(TemplateSet(templates))
    }

    pub fn templates(&self) -> &[Template] {
        &self.0
    }

    /// Append the sorted, de-duplicated features of the prediction at
    /// `position` to `out`, including the empty context.
    pub fn extract_into(
        &self,
        sentence: &Sentence,
        position: usize,
        out: &mut Vec<FeatureKey>,
    ) -> Result<()> {
        check_position(sentence, position)?;
        let start = out.len();
        out.push(FeatureKey::empty());
        for t in &self.0 {
            match t {
                Template::NGram { order } => push_ngrams(sentence, position, *order, out),
                Template::Skip(c) => push_skipgrams(sentence, position, c, out),
            }
        }
        out[start..].sort_unstable();
        let mut kept = start;
        for k in start..out.len() {
            if kept == start || out[k] != out[kept - 1] {
                out.swap(kept, k);
                kept += 1;
            }
        }
        out.truncate(kept);
        Ok(())
    }
}

impl fmt::Display for TemplateSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for t in &self.0 {
            writeln!(f, "{t}")?;
        }
        Ok(())
    }
}

fn check_position(sentence: &Sentence, position: usize) -> Result<()> {
    if position == 0 || position >= sentence.len() {
        return Err(SnmError::Index {
            position,
            len: sentence.len(),
        });
    }
    Ok(())
}

fn push_ngrams(sentence: &Sentence, position: usize, order: u32, out: &mut Vec<FeatureKey>) {
    let longest = (order as usize - 1).min(position);
    for k in 0..=longest {
        out.push(FeatureKey::ngram(&sentence[position - k..position]));
    }
}

fn push_skipgrams(sentence: &Sentence, p: usize, c: &SkipGramConfig, out: &mut Vec<FeatureKey>) {
    let p32 = p as u32;
    // Need at least one remote word, so a + s <= p - 1.
    for a in c.adjacent.min..=c.adjacent.upper(p32.saturating_sub(1)) {
        for s in c.skip.min..=c.skip.upper((p32 - 1).saturating_sub(a)) {
            if a + s >= p32 {
                break;
            }
            let room = p32 - a - s;
            for r in c.remote.min..=c.remote.upper(room) {
                if !c.context.contains(r + a) {
                    continue;
                }
                let (r, s, a) = (r as usize, s as usize, a as usize);
                let skip = if c.tie_skips {
                    SkipLen::Tied
                } else {
                    SkipLen::Exact(s as u32)
                };
                out.push(FeatureKey::skip(
                    &sentence[p - a - s - r..p - a - s],
                    skip,
                    &sentence[p - a..p],
                ));
            }
        }
    }
}

/// Context suffixes of length `0..max_order`, truncated at `<S>`.
pub fn extract_ngrams(sentence: &Sentence, position: usize, max_order: u32) -> Result<Vec<FeatureKey>> {
    check_position(sentence, position)?;
    if max_order < 1 {
        return Err(SnmError::Config("ngram order must be at least 1".into()));
    }
    let mut out = Vec::new();
    push_ngrams(sentence, position, max_order, &mut out);
    Ok(out)
}

/// All skip-gram placements for the target at `position` allowed by
/// `config`, sorted and de-duplicated.
pub fn extract_skipgrams(
    sentence: &Sentence,
    position: usize,
    config: &SkipGramConfig,
) -> Result<Vec<FeatureKey>> {
    check_position(sentence, position)?;
    config.validate()?;
    let mut out = Vec::new();
    push_skipgrams(sentence, position, config, &mut out);
    out.sort_unstable();
    out.dedup();
    Ok(out)
}

/// One prediction site.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Event {
    /// Sorted, unique, always containing the empty context.
    pub features: Vec<FeatureKey>,
    pub target: WordId,
}

/// One event per predicted token: every position except `<S>`.
pub fn make_events(sentence: &Sentence, templates: &TemplateSet) -> Result<Vec<Event>> {
    (1..sentence.len())
        .map(|p| {
            let mut features = Vec::new();
            templates.extract_into(sentence, p, &mut features)?;
            Ok(Event {
                features,
                target: sentence[p],
            })
        })
        .collect()
}
