//! Interpolated n-gram language models and per-example adaptation.
//!
//! A [`BaseModel`] is an additively smoothed n-gram model whose per-order
//! estimates are linearly interpolated. A [`TargetModel`] stores only the
//! n-gram counts of the text it was adapted on plus a mixing weight; bound to
//! its base it yields
//!
//! `p_target(w | h) = (1 - λ) · p_base(w | h) + λ · p_emp(w | h)`
//!
//! where `p_emp` is the same smoothed, interpolated estimator run over the
//! adaptation counts. Both terms are proper distributions, so the mixture is.

use alloc::boxed::Box;
use alloc::string::String;
use alloc::vec::Vec;

use rustc_hash::FxBuildHasher;
use serde::{Deserialize, Serialize};

use crate::corpus::{Example, Pool, Split};
use crate::tokenize::{Fnv, TokenId, TokenSeq, Vocabulary, BOS};

type Map<K, V> = hashbrown::HashMap<K, V, FxBuildHasher>;

pub const MAX_ORDER: usize = 8;

/// Conditional next-token distribution over a fixed vocabulary.
pub trait LanguageModel {
    fn vocab_size(&self) -> usize;

    /// `P(next | history)`, where `history` is every token before `next`.
    fn prob(&self, history: &[TokenId], next: TokenId) -> f64;
}

impl<M: LanguageModel + ?Sized> LanguageModel for &M {
    fn vocab_size(&self) -> usize {
        (**self).vocab_size()
    }

    fn prob(&self, history: &[TokenId], next: TokenId) -> f64 {
        (**self).prob(history, next)
    }
}

#[inline]
pub(crate) fn nll(p: f64) -> f64 {
    -libm::log(p)
}

#[inline]
pub(crate) fn mix(lambda: f64, base: f64, emp: f64) -> f64 {
    (1.0 - lambda) * base + lambda * emp
}

/// Mean negative log-probability (nats) over predicted positions.
pub fn cross_entropy<M: LanguageModel + ?Sized>(model: &M, seq: &TokenSeq) -> f64 {
    let ids = seq.ids();
    let mut total = 0.0;
    for i in 1..ids.len() {
        total += nll(model.prob(&ids[..i], ids[i]));
    }
    total / (ids.len() - 1) as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LmSettings {
    pub order: usize,
    pub smoothing: f64,
}

impl Default for LmSettings {
    fn default() -> Self {
        LmSettings {
            order: 3,
            smoothing: 0.1,
        }
    }
}

impl LmSettings {
    pub fn validate(&self) -> Result<(), LmError> {
        if self.order == 0 || self.order > MAX_ORDER {
            return Err(LmError::InvalidConfig("order must be in 1..=8"));
        }
        if !(self.smoothing > 0.0 && self.smoothing.is_finite()) {
            return Err(LmError::InvalidConfig("smoothing must be positive"));
        }
        Ok(())
    }
}

/// Raw n-gram and context counts for orders `1..=order`.
///
/// A context shorter than the model order at the start of a sequence is
/// left-padded with `BOS`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NgramCounts {
    order: usize,
    ngrams: Map<Box<[TokenId]>, u32>,
    contexts: Map<Box<[TokenId]>, u32>,
}

/// Fills `buf[..len]` with the `len` tokens preceding `history.len()`,
/// padding with `BOS`.
#[inline]
fn context_into(history: &[TokenId], len: usize, buf: &mut [TokenId; MAX_ORDER]) {
    let have = history.len().min(len);
    let pad = len - have;
    buf[..pad].fill(BOS);
    buf[pad..len].copy_from_slice(&history[history.len() - have..]);
}

impl NgramCounts {
    pub fn new(order: usize) -> Self {
        NgramCounts {
            order,
            ngrams: Map::default(),
            contexts: Map::default(),
        }
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn add(&mut self, seq: &TokenSeq) {
        let ids = seq.ids();
        let mut buf = [0; MAX_ORDER];
        for i in 1..ids.len() {
            for j in 0..self.order {
                context_into(&ids[..i], j, &mut buf);
                buf[j] = ids[i];
                *self.contexts.entry(Box::from(&buf[..j])).or_insert(0) += 1;
                *self.ngrams.entry(Box::from(&buf[..=j])).or_insert(0) += 1;
            }
        }
    }

    pub fn ngram(&self, key: &[TokenId]) -> u32 {
        self.ngrams.get(key).copied().unwrap_or(0)
    }

    pub fn context(&self, key: &[TokenId]) -> u32 {
        self.contexts.get(key).copied().unwrap_or(0)
    }

    /// Number of stored n-gram entries. Context totals are derived from these.
    pub fn entry_count(&self) -> usize {
        self.ngrams.len()
    }

    /// All n-gram entries sorted by key.
    pub fn entries(&self) -> Vec<(Vec<TokenId>, u32)> {
        let mut v: Vec<_> = self.ngrams.iter().map(|(k, &c)| (k.to_vec(), c)).collect();
        v.sort_unstable();
        v
    }

    pub fn from_entries(
        order: usize,
        entries: impl IntoIterator<Item = (Vec<TokenId>, u32)>,
    ) -> Result<Self, LmError> {
        let mut counts = NgramCounts::new(order);
        for (key, c) in entries {
            if key.is_empty() || key.len() > order {
                return Err(LmError::Corrupt("n-gram key length outside 1..=order"));
            }
            if c == 0 {
                return Err(LmError::Corrupt("zero n-gram count"));
            }
            *counts.contexts.entry(Box::from(&key[..key.len() - 1])).or_insert(0) += c;
            if counts.ngrams.insert(key.into_boxed_slice(), c).is_some() {
                return Err(LmError::Corrupt("duplicate n-gram key"));
            }
        }
        Ok(counts)
    }

    fn max_id(&self) -> Option<TokenId> {
        self.ngrams.keys().flat_map(|k| k.iter().copied()).max()
    }

    /// Smoothed estimate for each order, written to `out[..order]`.
    #[inline]
    fn components(
        &self,
        history: &[TokenId],
        next: TokenId,
        smoothing: f64,
        vocab_size: usize,
        out: &mut [f64],
    ) {
        let mut buf = [0; MAX_ORDER];
        let mass = smoothing * vocab_size as f64;
        for (j, slot) in out.iter_mut().enumerate().take(self.order) {
            context_into(history, j, &mut buf);
            let ctx = f64::from(self.context(&buf[..j]));
            buf[j] = next;
            let c = f64::from(self.ngram(&buf[..=j]));
            *slot = (c + smoothing) / (ctx + mass);
        }
    }

    #[inline]
    fn interpolated(
        &self,
        weights: &[f64],
        smoothing: f64,
        vocab_size: usize,
        history: &[TokenId],
        next: TokenId,
    ) -> f64 {
        let mut comps = [0.0; MAX_ORDER];
        self.components(history, next, smoothing, vocab_size, &mut comps);
        weights.iter().zip(&comps).map(|(w, c)| w * c).sum()
    }
}

/// Unadapted background model.
#[derive(Debug, Clone, PartialEq)]
pub struct BaseModel {
    vocab: Vocabulary,
    counts: NgramCounts,
    smoothing: f64,
    weights: Vec<f64>,
    fingerprint: u64,
}

const WEIGHT_STEPS: usize = 10;

/// All weight vectors on the simplex with resolution `1 / WEIGHT_STEPS`,
/// lexicographic in the step counts.
fn weight_grid(order: usize) -> Vec<Vec<f64>> {
    fn rec(left: usize, slots: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<f64>>) {
        if slots == 1 {
            cur.push(left);
            out.push(cur.iter().map(|&s| s as f64 / WEIGHT_STEPS as f64).collect());
            cur.pop();
            return;
        }
        for s in 0..=left {
            cur.push(s);
            rec(left - s, slots - 1, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    rec(WEIGHT_STEPS, order, &mut Vec::new(), &mut out);
    out
}

/// Weights proportional to context length + 1; used when no dev text exists.
pub fn default_weights(order: usize) -> Vec<f64> {
    let total = (order * (order + 1) / 2) as f64;
    (1..=order).map(|j| j as f64 / total).collect()
}

impl BaseModel {
    /// Counts `texts` and tunes interpolation weights on `dev_texts` by grid
    /// search over the weight simplex.
    pub fn train(texts: &[&str], dev_texts: &[&str], settings: LmSettings) -> Result<Self, LmError> {
        settings.validate()?;
        if texts.is_empty() {
            return Err(LmError::EmptyPool);
        }
        let vocab = Vocabulary::build(texts.iter().copied());
        let mut counts = NgramCounts::new(settings.order);
        for t in texts {
            counts.add(&vocab.encode(t));
        }
        let mut model = BaseModel::assemble(vocab, counts, settings.smoothing, default_weights(settings.order));
        model.tune_weights(dev_texts);
        Ok(model)
    }

    fn assemble(vocab: Vocabulary, counts: NgramCounts, smoothing: f64, weights: Vec<f64>) -> Self {
        let mut m = BaseModel {
            vocab,
            counts,
            smoothing,
            weights,
            fingerprint: 0,
        };
        m.fingerprint = m.compute_fingerprint();
        m
    }

    fn compute_fingerprint(&self) -> u64 {
        let mut h = Fnv::new();
        h.write(&self.vocab.fingerprint().to_le_bytes());
        h.write(&(self.counts.order as u64).to_le_bytes());
        h.write(&self.smoothing.to_bits().to_le_bytes());
        for w in &self.weights {
            h.write(&w.to_bits().to_le_bytes());
        }
        h.finish()
    }

    fn tune_weights(&mut self, dev_texts: &[&str]) {
        let order = self.order();
        let vsize = self.vocab.len();
        let mut table: Vec<[f64; MAX_ORDER]> = Vec::new();
        for t in dev_texts {
            let seq = self.vocab.encode(t);
            let ids = seq.ids();
            for i in 1..ids.len() {
                let mut comps = [0.0; MAX_ORDER];
                self.counts
                    .components(&ids[..i], ids[i], self.smoothing, vsize, &mut comps);
                table.push(comps);
            }
        }
        if table.is_empty() {
            return;
        }
        let mut best: Option<(f64, Vec<f64>)> = None;
        for w in weight_grid(order) {
            let ll: f64 = table
                .iter()
                .map(|c| libm::log(w.iter().zip(c).map(|(a, b)| a * b).sum::<f64>()))
                .sum();
            if best.as_ref().is_none_or(|(b, _)| ll > *b) {
                best = Some((ll, w));
            }
        }
        self.weights = best.map(|(_, w)| w).unwrap_or_else(|| default_weights(order));
        self.fingerprint = self.compute_fingerprint();
    }

    /// Rebuilds a model from persisted parts.
    pub fn from_parts(
        vocab: Vocabulary,
        order: usize,
        smoothing: f64,
        weights: Vec<f64>,
        entries: Vec<(Vec<TokenId>, u32)>,
    ) -> Result<Self, LmError> {
        LmSettings { order, smoothing }.validate()?;
        if weights.len() != order {
            return Err(LmError::Corrupt("one interpolation weight per order expected"));
        }
        let sum: f64 = weights.iter().sum();
        if weights.iter().any(|w| !(0.0..=1.0).contains(w)) || libm::fabs(sum - 1.0) > 1e-9 {
            return Err(LmError::Corrupt("interpolation weights must lie on the simplex"));
        }
        let counts = NgramCounts::from_entries(order, entries)?;
        if counts.max_id().is_some_and(|m| m as usize >= vocab.len()) {
            return Err(LmError::Corrupt("token id outside vocabulary"));
        }
        Ok(BaseModel::assemble(vocab, counts, smoothing, weights))
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn counts(&self) -> &NgramCounts {
        &self.counts
    }

    pub fn order(&self) -> usize {
        self.counts.order
    }

    pub fn smoothing(&self) -> f64 {
        self.smoothing
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Identity of this model as seen by the targets adapted on it.
    pub fn fingerprint(&self) -> u64 {
        self.fingerprint
    }

    pub fn encode(&self, text: &str) -> TokenSeq {
        self.vocab.encode(text)
    }

    /// Base probability of every predicted token of `seq`.
    pub fn position_probs(&self, seq: &TokenSeq) -> Vec<f64> {
        let ids = seq.ids();
        (1..ids.len()).map(|i| self.prob(&ids[..i], ids[i])).collect()
    }

    fn emp_prob(&self, counts: &NgramCounts, history: &[TokenId], next: TokenId) -> f64 {
        counts.interpolated(&self.weights, self.smoothing, self.vocab.len(), history, next)
    }
}

impl LanguageModel for BaseModel {
    fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    fn prob(&self, history: &[TokenId], next: TokenId) -> f64 {
        self.emp_prob(&self.counts, history, next)
    }
}

/// Trains a base model on every candidate's full text, tuning on the dev split.
pub fn train_base(pool: &Pool, settings: LmSettings) -> Result<BaseModel, LmError> {
    let texts: Vec<String> = pool.candidates().map(Example::full_text).collect();
    let dev: Vec<String> = pool.split(Split::Dev).map(Example::full_text).collect();
    let texts: Vec<&str> = texts.iter().map(String::as_str).collect();
    let dev: Vec<&str> = dev.iter().map(String::as_str).collect();
    BaseModel::train(&texts, &dev, settings)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptConfig {
    /// Candidate mixing weights; must contain 0.
    pub lambda_grid: Vec<f64>,
    /// Trailing share of each adaptation sequence's predicted tokens used as
    /// the held-in selection slice.
    pub dev_fraction: f64,
    /// Cap on the number of grid points evaluated.
    pub max_passes: usize,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        AdaptConfig {
            lambda_grid: alloc::vec![0.0, 0.1, 0.3, 0.5],
            dev_fraction: 1.0,
            max_passes: 20,
        }
    }
}

impl AdaptConfig {
    pub fn validate(&self) -> Result<(), LmError> {
        if self.lambda_grid.is_empty() {
            return Err(LmError::InvalidConfig("lambda grid is empty"));
        }
        if !self.lambda_grid.contains(&0.0) {
            return Err(LmError::InvalidConfig("lambda grid must contain 0"));
        }
        if self.lambda_grid.iter().any(|l| !(0.0..=1.0).contains(l)) {
            return Err(LmError::InvalidConfig("lambda weights must lie in [0, 1]"));
        }
        if !(self.dev_fraction > 0.0 && self.dev_fraction <= 1.0) {
            return Err(LmError::InvalidConfig("dev fraction must lie in (0, 1]"));
        }
        if self.max_passes == 0 {
            return Err(LmError::InvalidConfig("max passes must be positive"));
        }
        Ok(())
    }
}

/// Adaptation delta: counts of the source text and the selected weight.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetModel {
    /// Candidate id this model stands for in score matrices.
    pub name: String,
    pub source_ids: Vec<String>,
    lambda: f64,
    counts: NgramCounts,
    base_fingerprint: u64,
}

impl TargetModel {
    pub fn from_parts(
        name: String,
        source_ids: Vec<String>,
        lambda: f64,
        order: usize,
        base_fingerprint: u64,
        entries: Vec<(Vec<TokenId>, u32)>,
    ) -> Result<Self, LmError> {
        if !(0.0..=1.0).contains(&lambda) {
            return Err(LmError::Corrupt("lambda outside [0, 1]"));
        }
        Ok(TargetModel {
            name,
            source_ids,
            lambda,
            counts: NgramCounts::from_entries(order, entries)?,
            base_fingerprint,
        })
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn counts(&self) -> &NgramCounts {
        &self.counts
    }

    pub fn base_fingerprint(&self) -> u64 {
        self.base_fingerprint
    }

    pub fn bind<'a>(&'a self, base: &'a BaseModel) -> Result<Adapted<'a>, LmError> {
        if base.fingerprint != self.base_fingerprint || base.order() != self.counts.order {
            return Err(LmError::VocabularyMismatch {
                expected: self.base_fingerprint,
                found: base.fingerprint,
            });
        }
        Ok(Adapted { base, target: self })
    }

    /// Cross-entropy of `seq` given precomputed base probabilities for it.
    pub(crate) fn cross_entropy_with(&self, base: &BaseModel, seq: &TokenSeq, base_probs: &[f64]) -> f64 {
        self.suffix_cross_entropy_with(base, seq, base_probs, 1)
    }

    /// Mean negative log-likelihood of the tokens at positions `start..` of
    /// `seq`, each conditioned on its full history. `start >= 1`.
    pub(crate) fn suffix_cross_entropy_with(
        &self,
        base: &BaseModel,
        seq: &TokenSeq,
        base_probs: &[f64],
        start: usize,
    ) -> f64 {
        let ids = seq.ids();
        let mut total = 0.0;
        for i in start..ids.len() {
            let e = base.emp_prob(&self.counts, &ids[..i], ids[i]);
            total += nll(mix(self.lambda, base_probs[i - 1], e));
        }
        total / (ids.len() - start) as f64
    }
}

/// A target model bound to its base; the mixture distribution.
#[derive(Debug, Clone, Copy)]
pub struct Adapted<'a> {
    pub base: &'a BaseModel,
    pub target: &'a TargetModel,
}

impl Adapted<'_> {
    pub fn empirical_prob(&self, history: &[TokenId], next: TokenId) -> f64 {
        self.base.emp_prob(&self.target.counts, history, next)
    }
}

impl LanguageModel for Adapted<'_> {
    fn vocab_size(&self) -> usize {
        self.base.vocab.len()
    }

    fn prob(&self, history: &[TokenId], next: TokenId) -> f64 {
        let b = self.base.prob(history, next);
        mix(self.target.lambda, b, self.empirical_prob(history, next))
    }
}

fn encode_all(base: &BaseModel, texts: &[&str]) -> Result<(Vec<TokenSeq>, NgramCounts), LmError> {
    let seqs: Vec<TokenSeq> = texts.iter().map(|t| base.encode(t)).collect();
    if seqs.iter().all(TokenSeq::is_sentinel_only) {
        return Err(LmError::EmptyText);
    }
    let mut counts = NgramCounts::new(base.order());
    for s in &seqs {
        counts.add(s);
    }
    Ok((seqs, counts))
}

/// Adapts with a fixed mixing weight, skipping selection.
pub fn adapt_fixed(
    base: &BaseModel,
    source_ids: Vec<String>,
    texts: &[&str],
    lambda: f64,
) -> Result<TargetModel, LmError> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(LmError::InvalidConfig("lambda must lie in [0, 1]"));
    }
    let (_, counts) = encode_all(base, texts)?;
    Ok(TargetModel {
        name: source_ids.first().cloned().unwrap_or_default(),
        source_ids,
        lambda,
        counts,
        base_fingerprint: base.fingerprint,
    })
}

/// Adapts `base` toward `texts`. The weight is picked from the grid in
/// ascending order by held-in likelihood, stopping at the first decrease
/// (the objective is concave in λ) or after `max_passes` evaluations.
pub fn adapt_texts(
    base: &BaseModel,
    source_ids: Vec<String>,
    texts: &[&str],
    cfg: &AdaptConfig,
) -> Result<TargetModel, LmError> {
    cfg.validate()?;
    let (seqs, counts) = encode_all(base, texts)?;

    // (base prob, empirical prob) at every held-in position
    let mut slice: Vec<(f64, f64)> = Vec::new();
    for seq in &seqs {
        let ids = seq.ids();
        let predicted = ids.len() - 1;
        let take = (libm::ceil(cfg.dev_fraction * predicted as f64) as usize).clamp(1, predicted);
        for i in (ids.len() - take)..ids.len() {
            let h = &ids[..i];
            slice.push((base.prob(h, ids[i]), base.emp_prob(&counts, h, ids[i])));
        }
    }

    let mut grid = cfg.lambda_grid.clone();
    grid.sort_by(f64::total_cmp);
    grid.dedup();
    let mut best = (f64::INFINITY, 0.0);
    let mut previous = f64::INFINITY;
    for &lambda in grid.iter().take(cfg.max_passes) {
        let mut total = 0.0;
        for &(b, e) in &slice {
            total += nll(mix(lambda, b, e));
        }
        let objective = total / slice.len() as f64;
        if objective > previous {
            break;
        }
        if objective < best.0 {
            best = (objective, lambda);
        }
        previous = objective;
    }

    Ok(TargetModel {
        name: source_ids.first().cloned().unwrap_or_default(),
        source_ids,
        lambda: best.1,
        counts,
        base_fingerprint: base.fingerprint,
    })
}

/// Adapts `base` toward the full text of `examples`.
pub fn adapt(base: &BaseModel, examples: &[&Example], cfg: &AdaptConfig) -> Result<TargetModel, LmError> {
    if examples.is_empty() {
        return Err(LmError::EmptyText);
    }
    let texts: Vec<String> = examples.iter().map(|e| e.full_text()).collect();
    let texts: Vec<&str> = texts.iter().map(String::as_str).collect();
    let ids = examples.iter().map(|e| e.id.clone()).collect();
    adapt_texts(base, ids, &texts, cfg)
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum LmError {
    #[error("no candidate examples to train on")]
    EmptyPool,
    #[error("adaptation text contains no tokens")]
    EmptyText,
    #[error("target was adapted on base {expected:016x}, scored against {found:016x}")]
    VocabularyMismatch { expected: u64, found: u64 },
    #[error("invalid language model configuration: {0}")]
    InvalidConfig(&'static str),
    #[error("corrupt model data: {0}")]
    Corrupt(&'static str),
}
