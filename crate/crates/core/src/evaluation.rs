//! Sentence log-probabilities, perplexity and linear interpolation of
//! per-token probability streams.

use alloc::vec;
use alloc::vec::Vec;

use crate::corpus::{Sentence, UNK};
use crate::error::{Result, SnmError};
use crate::features::FeatureKey;
use crate::model::SnmModel;

/// Anything that assigns a conditional probability to every predicted
/// position of a sentence.
pub trait LanguageModel {
    /// Push `(ln P, flagged)` for positions `1..len` of `sentence`.
    fn log_probs(&self, sentence: &Sentence, out: &mut Vec<(f64, bool)>) -> Result<()>;
}

/// Every token equally likely among `size` outcomes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UniformModel {
    size: usize,
}

impl UniformModel {
    pub fn new(size: usize) -> Result<Self> {
        if size == 0 {
            return Err(SnmError::Config("uniform model over an empty vocabulary".into()));
        }
        Ok(UniformModel { size })
    }

    pub fn size(&self) -> usize {
        self.size
    }
}

impl LanguageModel for UniformModel {
    fn log_probs(&self, sentence: &Sentence, out: &mut Vec<(f64, bool)>) -> Result<()> {
        let lp = -libm::log(self.size as f64);
        out.extend((1..sentence.len()).map(|_| (lp, false)));
        Ok(())
    }
}

impl LanguageModel for SnmModel {
    fn log_probs(&self, sentence: &Sentence, out: &mut Vec<(f64, bool)>) -> Result<()> {
        let mut scorer = self.scorer();
        let mut keys: Vec<FeatureKey> = Vec::new();
        for p in 1..sentence.len() {
            keys.clear();
            self.templates().extract_into(sentence, p, &mut keys)?;
            let prob = scorer.probability(&keys, sentence[p])?;
            out.push((libm::log(prob.value), prob.flagged));
        }
        Ok(())
    }
}

/// Natural-log probability of a whole sentence: the sum over every predicted
/// position, `</S>` included.
pub fn sentence_logprob<M: LanguageModel + ?Sized>(model: &M, sentence: &Sentence) -> Result<f64> {
    let mut lp = Vec::with_capacity(sentence.len());
    model.log_probs(sentence, &mut lp)?;
    Ok(lp.iter().map(|&(l, _)| l).sum())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalReport {
    pub perplexity: f64,
    pub token_count: u64,
    /// Fraction of predicted tokens that are `<UNK>`; unknown when the
    /// report comes from bare probability streams.
    pub oov_rate: Option<f64>,
    pub flagged_events: u64,
}

/// Partial sums behind an [`EvalReport`]. Merging is associative, so
/// sentences can be evaluated in any grouping.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct EvalTally {
    pub log_prob: f64,
    pub tokens: u64,
    pub unknown: u64,
    pub flagged: u64,
}

impl EvalTally {
    pub fn add_sentence<M: LanguageModel + ?Sized>(
        &mut self,
        model: &M,
        sentence: &Sentence,
        scratch: &mut Vec<(f64, bool)>,
    ) -> Result<()> {
        scratch.clear();
        model.log_probs(sentence, scratch)?;
        for &(l, flagged) in scratch.iter() {
            self.log_prob += l;
            self.flagged += flagged as u64;
        }
        self.tokens += scratch.len() as u64;
        self.unknown += sentence[1..].iter().filter(|&&w| w == UNK).count() as u64;
        Ok(())
    }

    pub fn merge(&mut self, other: &EvalTally) {
        self.log_prob += other.log_prob;
        self.tokens += other.tokens;
        self.unknown += other.unknown;
        self.flagged += other.flagged;
    }

    pub fn report(&self) -> Result<EvalReport> {
        if self.tokens == 0 {
            return Err(SnmError::UndefinedRate);
        }
        let n = self.tokens as f64;
        Ok(EvalReport {
            perplexity: libm::exp(-self.log_prob / n),
            token_count: self.tokens,
            oov_rate: Some(self.unknown as f64 / n),
            flagged_events: self.flagged,
        })
    }
}

/// `exp(-(1/N) Σ ln P)` over every predicted token of `test`.
pub fn perplexity<'a, M, I>(model: &M, test: I) -> Result<EvalReport>
where
    M: LanguageModel + ?Sized,
    I: IntoIterator<Item = &'a Sentence>,
{
    let mut tally = EvalTally::default();
    let mut scratch = Vec::new();
    for s in test {
        tally.add_sentence(model, s, &mut scratch)?;
    }
    tally.report()
}

/// Per-token probabilities aligned with the predicted tokens of a corpus.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ProbabilityStream {
    values: Vec<f64>,
}

impl ProbabilityStream {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some((k, v)) = values.iter().enumerate().find(|(_, &v)| !(v > 0.0 && v <= 1.0)) {
            return Err(SnmError::Input(alloc::format!("probability {v} at token {k} is outside (0, 1]")));
        }
        Ok(ProbabilityStream { values })
    }

    pub fn from_log10(logs: &[f64]) -> Result<Self> {
        Self::new(logs.iter().map(|&l| libm::pow(10.0, l)).collect())
    }

    /// Stream of a model's probabilities over `test`, with the number of
    /// flagged (floored) events.
    pub fn from_model<'a, M, I>(model: &M, test: I) -> Result<(Self, u64)>
    where
        M: LanguageModel + ?Sized,
        I: IntoIterator<Item = &'a Sentence>,
    {
        let mut lp = Vec::new();
        for s in test {
            model.log_probs(s, &mut lp)?;
        }
        let flagged = lp.iter().filter(|(_, f)| *f).count() as u64;
        let values = lp.into_iter().map(|(l, _)| libm::exp(l).min(1.0)).collect();
        Ok((Self::new(values)?, flagged))
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn log10_values(&self) -> impl Iterator<Item = f64> + '_ {
        self.values.iter().map(|&v| libm::log10(v))
    }

    pub fn perplexity(&self) -> Result<f64> {
        if self.values.is_empty() {
            return Err(SnmError::UndefinedRate);
        }
        let s: f64 = self.values.iter().map(|&v| libm::log(v)).sum();
        Ok(libm::exp(-s / self.values.len() as f64))
    }
}

fn check_streams(streams: &[ProbabilityStream]) -> Result<usize> {
    let n = streams
        .first()
        .ok_or_else(|| SnmError::Input("no probability streams".into()))?
        .len();
    if let Some(s) = streams.iter().find(|s| s.len() != n) {
        return Err(SnmError::Input(alloc::format!(
            "stream lengths differ: {} vs {}",
            n,
            s.len()
        )));
    }
    if n == 0 {
        return Err(SnmError::UndefinedRate);
    }
    Ok(n)
}

/// Perplexity of the per-token mixture `Σ_m λ_m p_m`.
pub fn interpolate(streams: &[ProbabilityStream], weights: &[f64]) -> Result<EvalReport> {
    let n = check_streams(streams)?;
    if weights.len() != streams.len() {
        return Err(SnmError::Input(alloc::format!(
            "{} weights for {} streams",
            weights.len(),
            streams.len()
        )));
    }
    if weights.iter().any(|&w| w.is_nan() || w < 0.0) || (weights.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(SnmError::Input("weights must be non-negative and sum to 1".into()));
    }
    let mut log_prob = 0.0;
    for k in 0..n {
        let p: f64 = streams.iter().zip(weights).map(|(s, &w)| w * s.values[k]).sum();
        log_prob += libm::log(p);
    }
    Ok(EvalReport {
        perplexity: libm::exp(-log_prob / n as f64),
        token_count: n as u64,
        oov_rate: None,
        flagged_events: 0,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightFit {
    pub weights: Vec<f64>,
    pub iterations: u32,
    /// Mean natural-log likelihood per token under `weights`.
    pub log_likelihood: f64,
    /// All streams were identical; `weights` is uniform.
    pub degenerate: bool,
}

pub const EM_TOLERANCE: f64 = 1e-10;
pub const EM_MAX_ITERATIONS: u32 = 200;

/// Mixture weights maximizing the mean log-likelihood of `dev`, by EM.
pub fn optimize_weights(dev: &[ProbabilityStream]) -> Result<WeightFit> {
    if dev.len() < 2 {
        return Err(SnmError::Input("need at least two streams".into()));
    }
    let n = check_streams(dev)?;
    let m = dev.len();
    let uniform = vec![1.0 / m as f64; m];
    let mean_ll = |w: &[f64]| {
        (0..n)
            .map(|k| libm::log(dev.iter().zip(w).map(|(s, &l)| l * s.values[k]).sum::<f64>()))
            .sum::<f64>()
            / n as f64
    };
    if dev.iter().all(|s| s.values == dev[0].values) {
        let log_likelihood = mean_ll(&uniform);
        return Ok(WeightFit {
            weights: uniform,
            iterations: 0,
            log_likelihood,
            degenerate: true,
        });
    }
    let mut weights = uniform;
    let mut ll = mean_ll(&weights);
    let mut next = vec![0.0; m];
    let mut iterations = 0;
    while iterations < EM_MAX_ITERATIONS {
        next.iter_mut().for_each(|x| *x = 0.0);
        for k in 0..n {
            let mix: f64 = dev.iter().zip(&weights).map(|(s, &l)| l * s.values[k]).sum();
            for (acc, (s, &l)) in next.iter_mut().zip(dev.iter().zip(&weights)) {
                *acc += l * s.values[k] / mix;
            }
        }
        let total: f64 = next.iter().sum();
        for x in next.iter_mut() {
            *x /= total;
        }
        iterations += 1;
        let new_ll = mean_ll(&next);
        let improvement = new_ll - ll;
        core::mem::swap(&mut weights, &mut next);
        ll = new_ll;
        if improvement < EM_TOLERANCE {
            break;
        }
    }
    // EM approaches a vertex of the simplex only slowly; take the vertex
    // outright when it is at least as good.
    for k in 0..m {
        let mut vertex = vec![0.0; m];
        vertex[k] = 1.0;
        let v = mean_ll(&vertex);
        if v >= ll {
            weights = vertex;
            ll = v;
        }
    }
    Ok(WeightFit {
        weights,
        iterations,
        log_likelihood: ll,
        degenerate: false,
    })
}
