//! On-disk artifacts: vocabulary and count files (text), model files
//! (binary), probability streams and evaluation reports.
//!
//! Every writer goes through [`write_atomic`], so an interrupted or failed
//! command never leaves a partial artifact behind.

use std::fs;
use std::io::{self, BufRead, Write};
use std::path::Path;

use anyhow::{bail, ensure, Context, Result};

use snm_core::adjustment::{MetafeatureConfig, TableLayout, WeightTable};
use snm_core::corpus::{Vocabulary, WordId};
use snm_core::counts::{CountStore, FeatureId};
use snm_core::evaluation::{EvalReport, ProbabilityStream};
use snm_core::features::{FeatureKey, Shape, SkipLen, TemplateSet};
use snm_core::hash::KeyHasher;
use snm_core::model::SnmModel;

/// Write to a sibling temporary file and rename it over `path`.
pub fn write_atomic_with(path: &Path, fill: impl FnOnce(&mut dyn Write) -> io::Result<()>) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path.file_name().with_context(|| format!("{} is not a file path", path.display()))?;
    let tmp = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    let res = (|| -> io::Result<()> {
        let mut f = io::BufWriter::new(fs::File::create(&tmp)?);
        fill(&mut f)?;
        f.into_inner().map_err(io::IntoInnerError::into_error)?.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if res.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    res.with_context(|| format!("writing {}", path.display()))
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    write_atomic_with(path, |w| w.write_all(bytes))
}

/// Lines of a text file, without trailing newlines.
pub fn read_lines(path: &Path) -> Result<Vec<String>> {
    let f = fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    io::BufReader::new(f)
        .lines()
        .collect::<io::Result<_>>()
        .with_context(|| format!("reading {}", path.display()))
}

// ---------------------------------------------------------------- vocabulary

const VOCAB_HEADER: &str = "#snm-vocab min_count=";

/// `word<TAB>count` per line in id order, after a header carrying the
/// count cutoff.
pub fn format_vocab(v: &Vocabulary) -> String {
    let mut out = format!("{VOCAB_HEADER}{}\n", v.min_count());
    for (w, c) in v.entries() {
        out.push_str(w);
        out.push('\t');
        out.push_str(&c.to_string());
        out.push('\n');
    }
    out
}

pub fn parse_vocab(text: &str) -> Result<Vocabulary> {
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().context("empty vocabulary file")?;
    let min_count: u64 = header
        .strip_prefix(VOCAB_HEADER)
        .and_then(|n| n.trim().parse().ok())
        .context("missing vocabulary header")?;
    let mut entries = Vec::new();
    for (n, line) in lines {
        let (w, c) = line
            .split_once('\t')
            .with_context(|| format!("vocabulary line {}: expected word<TAB>count", n + 1))?;
        let c = c.parse().with_context(|| format!("vocabulary line {}: bad count", n + 1))?;
        entries.push((w.to_string(), c));
    }
    Ok(Vocabulary::from_entries(entries, min_count)?)
}

pub fn read_vocab(path: &Path) -> Result<Vocabulary> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    parse_vocab(&text).with_context(|| format!("parsing vocabulary {}", path.display()))
}

// -------------------------------------------------------------------- counts

const COUNTS_MAGIC: &str = "#snm-counts 1";

/// Text count file:
///
/// ```text
/// #snm-counts 1
/// #template ngram order=2
/// [the]<TAB>cat<TAB>3
/// [the]<TAB>dog<TAB>1
/// [the]<TAB>*<TAB>4
/// ```
///
/// Features appear in canonical key order, each as its pair lines (by target
/// id) followed by a `*` total line.
pub fn write_counts(
    w: &mut dyn Write,
    counts: &CountStore,
    vocab: &Vocabulary,
    templates: &TemplateSet,
) -> io::Result<()> {
    writeln!(w, "{COUNTS_MAGIC}")?;
    for t in templates.templates() {
        writeln!(w, "#template {t}")?;
    }
    let mut order: Vec<FeatureId> = (0..counts.len() as FeatureId).collect();
    order.sort_unstable_by(|&a, &b| counts.key(a).cmp(counts.key(b)));
    let mut key = String::new();
    for i in order {
        key.clear();
        counts.key(i).render_into(vocab, &mut key);
        let row = counts.row(i);
        for (&t, &c) in row.targets.iter().zip(row.counts) {
            writeln!(w, "{key}\t{}\t{c}", vocab.word(t))?;
        }
        writeln!(w, "{key}\t*\t{}", row.total)?;
    }
    Ok(())
}

pub fn format_counts(counts: &CountStore, vocab: &Vocabulary, templates: &TemplateSet) -> String {
    let mut out = Vec::new();
    write_counts(&mut out, counts, vocab, templates).expect("writing to memory");
    String::from_utf8(out).expect("keys are UTF-8")
}

pub fn parse_counts(text: &str, vocab: &Vocabulary) -> Result<(CountStore, TemplateSet)> {
    let mut lines = text.lines().enumerate();
    ensure!(
        lines.next().map(|l| l.1) == Some(COUNTS_MAGIC),
        "not a count file (missing {COUNTS_MAGIC:?} header)"
    );
    let mut template_text = String::new();
    let mut rows: Vec<(FeatureKey, Vec<(WordId, u64)>)> = Vec::new();
    let mut open: Option<(String, Vec<(WordId, u64)>)> = None;
    for (n, line) in lines {
        let at = || format!("count line {}", n + 1);
        if let Some(t) = line.strip_prefix("#template ") {
            ensure!(rows.is_empty() && open.is_none(), "{}: template after counts", at());
            template_text.push_str(t);
            template_text.push('\n');
            continue;
        }
        if line.starts_with('#') || line.is_empty() {
            continue;
        }
        let mut f = line.split('\t');
        let (Some(key), Some(target), Some(count), None) = (f.next(), f.next(), f.next(), f.next()) else {
            bail!("{}: expected key<TAB>target<TAB>count", at());
        };
        let count: u64 = count.parse().with_context(at)?;
        match &mut open {
            Some((k, pairs)) if k == key => {
                if target == "*" {
                    let sum: u64 = pairs.iter().map(|p| p.1).sum();
                    ensure!(sum == count, "{}: total {count} differs from row sum {sum}", at());
                    let fk = FeatureKey::parse(key, vocab).with_context(at)?;
                    rows.push((fk, std::mem::take(pairs)));
                    open = None;
                } else {
                    let t = vocab.id(target).with_context(|| format!("{}: unknown word {target:?}", at()))?;
                    pairs.push((t, count));
                }
            }
            Some((k, _)) => bail!("{}: row {k:?} has no total line", at()),
            None => {
                ensure!(target != "*", "{}: total line without pairs", at());
                let t = vocab.id(target).with_context(|| format!("{}: unknown word {target:?}", at()))?;
                open = Some((key.to_string(), vec![(t, count)]));
            }
        }
    }
    if let Some((k, _)) = open {
        bail!("row {k:?} has no total line");
    }
    let templates = TemplateSet::parse(&template_text)?;
    let store = CountStore::from_rows(vocab, rows)?;
    Ok((store, templates))
}

pub fn read_counts(path: &Path, vocab: &Vocabulary) -> Result<(CountStore, TemplateSet)> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    parse_counts(&text, vocab).with_context(|| format!("parsing counts {}", path.display()))
}

// --------------------------------------------------------------------- model

const MODEL_MAGIC: &[u8; 8] = b"SNMMODEL";
const MODEL_VERSION: u32 = 1;

struct Encoder(Vec<u8>);

impl Encoder {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_bits().to_le_bytes());
    }
    fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.0.extend_from_slice(s.as_bytes());
    }
}

struct Decoder<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Decoder<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        ensure!(self.buf.len() - self.pos >= n, "model file is truncated");
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into()?))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into()?))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_bits(self.u64()?))
    }
    fn str(&mut self) -> Result<&'a str> {
        let n = self.u32()? as usize;
        Ok(std::str::from_utf8(self.take(n)?)?)
    }
    /// Element count, bounded by the bytes left so that a corrupt length
    /// cannot trigger a huge allocation.
    fn len(&mut self, min_elem: usize) -> Result<usize> {
        let n = self.u64()? as usize;
        ensure!(
            n.saturating_mul(min_elem) <= self.buf.len() - self.pos,
            "model file is truncated"
        );
        Ok(n)
    }
}

fn encode_key(e: &mut Encoder, key: &FeatureKey) {
    let remote = match key.shape() {
        Shape::NGram => {
            e.u8(0);
            0
        }
        Shape::Skip { remote, skip: SkipLen::Exact(s) } => {
            e.u8(1);
            e.u32(s);
            remote
        }
        Shape::Skip { remote, skip: SkipLen::Tied } => {
            e.u8(2);
            remote
        }
    };
    e.u8(remote);
    e.u32(key.words().len() as u32);
    for &w in key.words() {
        e.u32(w);
    }
}

fn decode_key(d: &mut Decoder<'_>, vocab_len: usize) -> Result<FeatureKey> {
    let kind = d.u8()?;
    let skip = match kind {
        0 => None,
        1 => Some(SkipLen::Exact(d.u32()?)),
        2 => Some(SkipLen::Tied),
        _ => bail!("bad feature kind {kind}"),
    };
    let remote = d.u8()? as usize;
    let n = d.u32()? as usize;
    ensure!(n <= d.buf.len() - d.pos, "model file is truncated");
    let mut words = Vec::with_capacity(n);
    for _ in 0..n {
        let w = d.u32()?;
        ensure!((w as usize) < vocab_len, "word id {w} out of range");
        words.push(w);
    }
    Ok(match skip {
        None => FeatureKey::ngram(&words),
        Some(s) => {
            ensure!(remote >= 1 && remote <= n, "bad skip-gram remote length");
            FeatureKey::skip(&words[..remote], s, &words[remote..])
        }
    })
}

/// Binary model file, little endian:
///
/// header (magic, version, hash seed, table bits, metafeature flags,
/// templates), vocabulary, counts, weights, optional row sums, then a hash
/// of everything before it.
pub fn encode_model(m: &SnmModel) -> Vec<u8> {
    let mut e = Encoder(Vec::new());
    e.0.extend_from_slice(MODEL_MAGIC);
    e.u32(MODEL_VERSION);
    let layout = m.table().layout();
    e.u64(layout.seed);
    e.u8(layout.bits);
    e.u8(m.mf_config().to_bits());
    e.str(&m.templates().to_string());

    let v = m.vocab();
    e.u64(v.min_count());
    e.u64(v.len() as u64);
    for (w, c) in v.entries() {
        e.str(w);
        e.u64(c);
    }

    let counts = m.counts();
    e.u64(counts.len() as u64);
    for i in 0..counts.len() as FeatureId {
        encode_key(&mut e, counts.key(i));
        let row = counts.row(i);
        e.u64(row.targets.len() as u64);
        for (&t, &c) in row.targets.iter().zip(row.counts) {
            e.u32(t);
            e.u64(c);
        }
    }

    let w = m.table().as_slice();
    e.u64(w.len() as u64);
    for &x in w {
        e.f64(x);
    }
    match m.row_sums() {
        Some(sums) => {
            e.u8(1);
            for &s in sums {
                e.f64(s);
            }
        }
        None => e.u8(0),
    }
    let mut h = KeyHasher::new(0);
    h.write(&e.0);
    let check = h.finish();
    e.u64(check);
    e.0
}

/// Decode a model; row sums are recomputed when the file has none.
pub fn decode_model(bytes: &[u8]) -> Result<SnmModel> {
    ensure!(bytes.len() >= MODEL_MAGIC.len() + 12 && &bytes[..8] == MODEL_MAGIC, "not an SNM model file");
    let (body, tail) = bytes.split_at(bytes.len() - 8);
    let mut h = KeyHasher::new(0);
    h.write(body);
    ensure!(h.finish().to_le_bytes() == tail, "model file checksum mismatch");
    let mut d = Decoder { buf: body, pos: 8 };
    let version = d.u32()?;
    ensure!(version == MODEL_VERSION, "unsupported model version {version}");
    let seed = d.u64()?;
    let bits = d.u8()?;
    let layout = TableLayout::new(bits, seed)?;
    let mf = MetafeatureConfig::from_bits(d.u8()?)?;
    let templates = TemplateSet::parse(d.str()?)?;

    let min_count = d.u64()?;
    let nv = d.len(12)?;
    let mut entries = Vec::with_capacity(nv);
    for _ in 0..nv {
        let w = d.str()?.to_string();
        entries.push((w, d.u64()?));
    }
    let vocab = Vocabulary::from_entries(entries, min_count)?;

    let nf = d.len(14)?;
    let mut rows = Vec::with_capacity(nf);
    for _ in 0..nf {
        let key = decode_key(&mut d, vocab.len())?;
        let np = d.len(12)?;
        let mut pairs = Vec::with_capacity(np);
        for _ in 0..np {
            let t = d.u32()?;
            pairs.push((t, d.u64()?));
        }
        rows.push((key, pairs));
    }
    // the writer emits rows in id order, so ids survive the round trip
    let counts = CountStore::from_rows(&vocab, rows)?;

    let nw = d.len(8)?;
    ensure!(nw == layout.len(), "weight table has {nw} entries, expected {}", layout.len());
    let weights = (0..nw).map(|_| d.f64()).collect::<Result<Vec<_>>>()?;
    let table = WeightTable::from_weights(layout, weights)?;
    let has_sums = d.u8()?;
    let sums = match has_sums {
        0 => None,
        1 => Some((0..counts.len()).map(|_| d.f64()).collect::<Result<Vec<_>>>()?),
        _ => bail!("bad row-sum flag"),
    };
    ensure!(d.pos == body.len(), "trailing bytes in model file");
    let mut model = SnmModel::new(vocab, templates, mf, counts, table)?;
    match sums {
        Some(s) => model.set_row_sums(s)?,
        None => model.finalize(),
    }
    Ok(model)
}

pub fn write_model(path: &Path, m: &SnmModel) -> Result<()> {
    write_atomic(path, &encode_model(m))
}

pub fn read_model(path: &Path) -> Result<SnmModel> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    decode_model(&bytes).with_context(|| format!("loading model {}", path.display()))
}

// ------------------------------------------------------------------- streams

/// One log10 probability per line; `#` starts a comment.
pub fn format_stream(s: &ProbabilityStream) -> String {
    let mut out = String::new();
    for l in s.log10_values() {
        out.push_str(&format!("{l}\n"));
    }
    out
}

pub fn parse_stream(text: &str) -> Result<ProbabilityStream> {
    let mut logs = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let v = line.split('#').next().unwrap_or("").trim();
        if v.is_empty() {
            continue;
        }
        logs.push(
            v.parse::<f64>()
                .with_context(|| format!("stream line {}: bad number {v:?}", n + 1))?,
        );
    }
    Ok(ProbabilityStream::from_log10(&logs)?)
}

pub fn read_stream(path: &Path) -> Result<ProbabilityStream> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    parse_stream(&text).with_context(|| format!("parsing stream {}", path.display()))
}

// ------------------------------------------------------------------- reports

/// `key: value` lines followed by a one-line machine-readable summary.
pub fn format_report(r: &EvalReport) -> String {
    let oov = r.oov_rate.map_or_else(|| "n/a".to_string(), |x| format!("{x:.6}"));
    format!(
        "perplexity: {:.6}\ntoken_count: {}\noov_rate: {oov}\nflagged_events: {}\n{}\n",
        r.perplexity,
        r.token_count,
        r.flagged_events,
        summary_line(r)
    )
}

pub fn summary_line(r: &EvalReport) -> String {
    let oov = r.oov_rate.map_or_else(|| "n/a".to_string(), |x| format!("{x}"));
    format!(
        "summary perplexity={} tokens={} oov_rate={oov} flagged={}",
        r.perplexity, r.token_count, r.flagged_events
    )
}

/// Read back a report's summary line.
pub fn parse_summary(text: &str) -> Result<EvalReport> {
    let line = text
        .lines()
        .find(|l| l.starts_with("summary "))
        .context("no summary line")?;
    let mut r = EvalReport {
        perplexity: f64::NAN,
        token_count: 0,
        oov_rate: None,
        flagged_events: 0,
    };
    for field in line.split_whitespace().skip(1) {
        let (k, v) = field.split_once('=').context("bad summary field")?;
        match k {
            "perplexity" => r.perplexity = v.parse()?,
            "tokens" => r.token_count = v.parse()?,
            "oov_rate" => r.oov_rate = if v == "n/a" { None } else { Some(v.parse()?) },
            "flagged" => r.flagged_events = v.parse()?,
            _ => bail!("unknown summary field {k:?}"),
        }
    }
    Ok(r)
}
