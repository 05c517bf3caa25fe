//! Vocabulary construction and sentence tokenization.
//!
//! Ids 0, 1 and 2 are reserved for `<S>`, `</S>` and `<UNK>`. All other
//! words are ordered by descending count with ties broken lexicographically,
//! so two builds over the same text always assign the same ids.

use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::ops::Deref;

use hashbrown::HashMap;

use crate::error::{Result, SnmError};
use crate::hash::KeyHasher;

pub type WordId = u32;

pub const BOS: WordId = 0;
pub const EOS: WordId = 1;
pub const UNK: WordId = 2;
pub const BOS_TOKEN: &str = "<S>";
pub const EOS_TOKEN: &str = "</S>";
pub const UNK_TOKEN: &str = "<UNK>";
pub const RESERVED: [&str; 3] = [BOS_TOKEN, EOS_TOKEN, UNK_TOKEN];

/// Raw word frequencies gathered from a corpus shard.
///
/// Merging is associative and commutative, so shards can be counted
/// independently and combined in any order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct WordCounts {
    counts: HashMap<String, u64>,
    sentences: u64,
}

impl WordCounts {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_line(&mut self, line: &str) {
        self.sentences += 1;
        for word in line.split_whitespace() {
            match self.counts.get_mut(word) {
                Some(c) => *c += 1,
                None => {
                    self.counts.insert(word.to_string(), 1);
                }
            }
        }
    }

    pub fn merge(&mut self, other: WordCounts) {
        self.sentences += other.sentences;
        for (word, c) in other.counts {
            *self.counts.entry(word).or_insert(0) += c;
        }
    }

    pub fn sentences(&self) -> u64 {
        self.sentences
    }

    pub fn get(&self, word: &str) -> u64 {
        self.counts.get(word).copied().unwrap_or(0)
    }

    pub fn distinct(&self) -> usize {
        self.counts.len()
    }
}

#[derive(Debug, Clone)]
pub struct Vocabulary {
    words: Vec<String>,
    counts: Vec<u64>,
    index: HashMap<String, WordId>,
    min_count: u64,
}

impl PartialEq for Vocabulary {
    fn eq(&self, other: &Self) -> bool {
        self.words == other.words && self.counts == other.counts
    }
}

/// Count words over `lines` (one sentence per line) and keep those seen at
/// least `min_count` times.
pub fn build_vocabulary<I, S>(lines: I, min_count: u64) -> Result<Vocabulary>
where
    I: IntoIterator<Item = S>,
    S: AsRef<str>,
{
    check_min_count(min_count)?;
    let mut counts = WordCounts::new();
    for line in lines {
        counts.add_line(line.as_ref());
    }
    Vocabulary::from_counts(&counts, min_count)
}

fn check_min_count(min_count: u64) -> Result<()> {
    if min_count < 1 {
        return Err(SnmError::Config("min_count must be at least 1".into()));
    }
    Ok(())
}

impl Vocabulary {
    pub fn from_counts(counts: &WordCounts, min_count: u64) -> Result<Self> {
        check_min_count(min_count)?;
        let mut kept: Vec<(&str, u64)> = Vec::new();
        let mut discarded = 0u64;
        for (word, &c) in &counts.counts {
            if RESERVED.contains(&word.as_str()) {
                continue;
            }
            if c >= min_count {
                kept.push((word.as_str(), c));
            } else {
                discarded += c;
            }
        }
        kept.sort_unstable_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));

        let mut entries = Vec::with_capacity(kept.len() + 3);
        entries.push((BOS_TOKEN.to_string(), counts.sentences));
        entries.push((EOS_TOKEN.to_string(), counts.sentences));
        entries.push((UNK_TOKEN.to_string(), discarded));
        entries.extend(kept.into_iter().map(|(w, c)| (w.to_string(), c)));
        Self::from_entries(entries, min_count)
    }

    /// Rebuild from `(word, count)` pairs in id order, reserved tokens first.
    pub fn from_entries(entries: Vec<(String, u64)>, min_count: u64) -> Result<Self> {
        check_min_count(min_count)?;
        if entries.len() < 3 || entries.iter().zip(RESERVED).any(|((w, _), r)| w != r) {
            return Err(SnmError::Input(
                "vocabulary must start with <S>, </S>, <UNK>".into(),
            ));
        }
        let mut words = Vec::with_capacity(entries.len());
        let mut counts = Vec::with_capacity(entries.len());
        let mut index = HashMap::with_capacity(entries.len());
        for (id, (word, c)) in entries.into_iter().enumerate() {
            if id >= 3 && c < min_count {
                return Err(SnmError::Input(alloc::format!(
                    "word {word:?} has count {c} below min_count {min_count}"
                )));
            }
            if word.is_empty() || word.chars().any(char::is_whitespace) {
                return Err(SnmError::Input(alloc::format!("invalid word {word:?}")));
            }
            if index.insert(word.clone(), id as WordId).is_some() {
                return Err(SnmError::Input(alloc::format!("duplicate word {word:?}")));
            }
            words.push(word);
            counts.push(c);
        }
        Ok(Vocabulary {
            words,
            counts,
            index,
            min_count,
        })
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    /// Always false: the reserved tokens are present in every vocabulary.
    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn min_count(&self) -> u64 {
        self.min_count
    }

    pub fn id(&self, word: &str) -> Option<WordId> {
        self.index.get(word).copied()
    }

    pub fn word(&self, id: WordId) -> &str {
        &self.words[id as usize]
    }

    pub fn count(&self, id: WordId) -> u64 {
        self.counts[id as usize]
    }

    pub fn contains_id(&self, id: WordId) -> bool {
        (id as usize) < self.words.len()
    }

    pub fn entries(&self) -> impl Iterator<Item = (&str, u64)> + '_ {
        self.words
            .iter()
            .map(String::as_str)
            .zip(self.counts.iter().copied())
    }

    /// Hash of the word list, used to reject merging count stores built
    /// against different vocabularies.
    pub fn fingerprint(&self) -> u64 {
        let mut h = KeyHasher::new(0x0076_6f63_6162);
        for w in &self.words {
            h.write(w.as_bytes());
            h.write(b"\n");
        }
        h.finish()
    }

    /// Map a whitespace-tokenized line to ids, substituting `<UNK>` for
    /// out-of-vocabulary words and adding boundary markers.
    pub fn tokenize(&self, line: &str) -> Sentence {
        let mut ids = Vec::with_capacity(line.len() / 4 + 2);
        ids.push(BOS);
        for word in line.split_whitespace() {
            let id = match self.id(word) {
                // literal boundary markers inside a line are not boundaries
                Some(BOS) | Some(EOS) | None => UNK,
                Some(id) => id,
            };
            ids.push(id);
        }
        ids.push(EOS);
        Sentence(ids)
    }

    /// Inverse of [`tokenize`](Self::tokenize) for in-vocabulary text.
    pub fn detokenize(&self, sentence: &Sentence) -> String {
        let mut out = String::new();
        for &id in sentence.inner() {
            if !out.is_empty() {
                out.push(' ');
            }
            out.push_str(self.word(id));
        }
        out
    }
}

/// Token ids of one sentence, `<S>` first and `</S>` last.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Sentence(Vec<WordId>);

impl Sentence {
    /// Validate a raw id sequence against `vocab`.
    pub fn from_ids(ids: Vec<WordId>, vocab: &Vocabulary) -> Result<Self> {
        if ids.len() < 2 || ids[0] != BOS || *ids.last().unwrap() != EOS {
            return Err(SnmError::Input(
                "sentence must start with <S> and end with </S>".into(),
            ));
        }
        if ids[1..].contains(&BOS) {
            return Err(SnmError::Input("<S> inside sentence".into()));
        }
        if let Some(&bad) = ids.iter().find(|&&id| !vocab.contains_id(id)) {
            return Err(SnmError::Lookup {
                kind: "word id",
                key: alloc::format!("{bad}"),
            });
        }
        Ok(Sentence(ids))
    }

    /// Tokens between the boundary markers.
    pub fn inner(&self) -> &[WordId] {
        &self.0[1..self.0.len() - 1]
    }

    /// Number of prediction events: every token except `<S>`.
    pub fn predicted(&self) -> usize {
        self.0.len() - 1
    }

    pub fn into_ids(self) -> Vec<WordId> {
        self.0
    }
}

impl Deref for Sentence {
    type Target = [WordId];

    fn deref(&self) -> &[WordId] {
        &self.0
    }
}

/// Fraction of predicted tokens that are `<UNK>`; `<S>` is never predicted
/// and so is excluded from the denominator.
pub fn oov_rate<'a, I>(sentences: I) -> Result<f64>
where
    I: IntoIterator<Item = &'a Sentence>,
{
    let mut unknown = 0u64;
    let mut predicted = 0u64;
    for s in sentences {
        predicted += s.predicted() as u64;
        unknown += s[1..].iter().filter(|&&id| id == UNK).count() as u64;
    }
    if predicted == 0 {
        return Err(SnmError::UndefinedRate);
    }
    Ok(unknown as f64 / predicted as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn cutoff_keeps_frequent_words() {
        let v = build_vocabulary(["a a a b b c"], 3).unwrap();
        assert_eq!(v.len(), 4);
        assert_eq!(v.word(3), "a");
        assert_eq!(v.count(UNK), 3);
        assert_eq!(v.id("b"), None);
    }

    #[test]
    fn empty_corpus_has_only_reserved_tokens() {
        let v = build_vocabulary(core::iter::empty::<&str>(), 1).unwrap();
        assert_eq!(v.len(), 3);
        assert_eq!(v.entries().map(|e| e.0).collect::<Vec<_>>(), RESERVED);
    }

    #[test]
    fn zero_min_count_is_config_error() {
        assert!(matches!(
            build_vocabulary(["a"], 0),
            Err(SnmError::Config(_))
        ));
    }

    #[test]
    fn ties_break_lexicographically() {
        let v = build_vocabulary(["b a c a b c d"], 1).unwrap();
        let words: Vec<_> = v.entries().skip(3).map(|e| e.0).collect();
        assert_eq!(words, ["a", "b", "c", "d"]);
    }

    #[test]
    fn tokenize_maps_oov_to_unknown() {
        let v = build_vocabulary(["a"], 1).unwrap();
        let a = v.id("a").unwrap();
        assert_eq!(&*v.tokenize("a zzz"), &[BOS, a, UNK, EOS]);
        assert_eq!(&*v.tokenize(""), &[BOS, EOS]);
        assert_eq!(&*v.tokenize("<S> </S>"), &[BOS, UNK, UNK, EOS]);
    }

    #[test]
    fn oov_rate_extremes() {
        let v = build_vocabulary(["a b"], 1).unwrap();
        let known = [v.tokenize("a b a")];
        assert_eq!(oov_rate(&known).unwrap(), 0.0);
        // </S> is predicted too, so an all-unknown sentence needs no end marker
        // in the numerator: 2 unknown of 3 predicted.
        let unk = [v.tokenize("x y")];
        assert!((oov_rate(&unk).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        let only_unk = [Sentence(vec![BOS, UNK, UNK])];
        assert_eq!(oov_rate(&only_unk).unwrap(), 1.0);
        assert_eq!(oov_rate(&[]), Err(SnmError::UndefinedRate));
    }

    #[test]
    fn from_ids_validates() {
        let v = build_vocabulary(["a"], 1).unwrap();
        assert!(Sentence::from_ids(vec![BOS, 3, EOS], &v).is_ok());
        assert!(Sentence::from_ids(vec![BOS, BOS, EOS], &v).is_err());
        assert!(Sentence::from_ids(vec![3, EOS], &v).is_err());
        assert!(Sentence::from_ids(vec![BOS, 99, EOS], &v).is_err());
    }

    #[test]
    fn merge_is_commutative() {
        let mut a = WordCounts::new();
        a.add_line("x y y");
        let mut b = WordCounts::new();
        b.add_line("y z");
        let mut ab = a.clone();
        ab.merge(b.clone());
        let mut ba = b;
        ba.merge(a);
        assert_eq!(ab, ba);
        assert_eq!(ab.get("y"), 3);
        assert_eq!(ab.sentences(), 2);
    }
}
