//! Numerical check that a one-step cross-entropy difference tracks the dot
//! product of training and test gradients.
//!
//! [`TinyLm`] is a bigram softmax model: the previous token's embedding is
//! projected to logits, `z = E[prev] · W + b`. Its exact gradient, a one-step
//! "target" update `θ + η·g(train)`, and the resulting log-likelihood change on
//! a test text are all computed here, so the first-order relation
//! `Δ log p(test) ≈ η · g(train)ᵀ g(test)` can be measured directly.

use alloc::string::String;
use alloc::vec::Vec;
use alloc::{format, vec};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::stats::{pearson, spearman};
use crate::tokenize::{TokenSeq, Vocabulary};

#[derive(Debug, Clone, PartialEq)]
pub struct TinyLm {
    vocab: Vocabulary,
    dim: usize,
    params: Vec<f64>,
}

/// Flat gradient of the mean log-likelihood with respect to all parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct GradVector(pub Vec<f64>);

impl GradVector {
    pub fn dot(&self, other: &GradVector) -> f64 {
        self.0.iter().zip(&other.0).map(|(a, b)| a * b).sum()
    }

    pub fn norm(&self) -> f64 {
        libm::sqrt(self.dot(self))
    }
}

impl TinyLm {
    /// Parameters drawn uniformly from `[-scale, scale]`.
    pub fn random(vocab: Vocabulary, dim: usize, scale: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = Self::param_count(vocab.len(), dim);
        let params = (0..n).map(|_| rng.random_range(-scale..=scale)).collect();
        TinyLm { vocab, dim, params }
    }

    /// All-zero parameters: every conditional distribution is uniform.
    pub fn zeros(vocab: Vocabulary, dim: usize) -> Self {
        let n = Self::param_count(vocab.len(), dim);
        TinyLm {
            vocab,
            dim,
            params: vec![0.0; n],
        }
    }

    fn param_count(v: usize, d: usize) -> usize {
        v * d + d * v + v
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn with_params(&self, params: Vec<f64>) -> Self {
        assert_eq!(params.len(), self.params.len());
        TinyLm {
            params,
            ..self.clone()
        }
    }

    fn v(&self) -> usize {
        self.vocab.len()
    }

    /// log-softmax of the logits following `prev`.
    fn log_probs(&self, prev: usize) -> Vec<f64> {
        let (v, d) = (self.v(), self.dim);
        let emb = &self.params[prev * d..(prev + 1) * d];
        let w = &self.params[v * d..v * d + d * v];
        let b = &self.params[2 * v * d..];
        let mut z: Vec<f64> = (0..v)
            .map(|j| b[j] + (0..d).map(|k| emb[k] * w[k * v + j]).sum::<f64>())
            .collect();
        let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + libm::log(z.iter().map(|x| libm::exp(x - max)).sum::<f64>());
        z.iter_mut().for_each(|x| *x -= lse);
        z
    }

    fn encode(&self, text: &str) -> Result<TokenSeq, GradError> {
        let seq = self.vocab.encode(text);
        if seq.is_sentinel_only() {
            return Err(GradError::EmptyText);
        }
        Ok(seq)
    }

    /// Mean log-probability per predicted token.
    pub fn log_likelihood(&self, text: &str) -> Result<f64, GradError> {
        let seq = self.encode(text)?;
        let ids = seq.ids();
        let total: f64 = ids
            .windows(2)
            .map(|w| self.log_probs(w[0] as usize)[w[1] as usize])
            .sum();
        Ok(total / seq.predicted() as f64)
    }

    /// Exact gradient of [`Self::log_likelihood`].
    pub fn grad(&self, text: &str) -> Result<GradVector, GradError> {
        let seq = self.encode(text)?;
        let (v, d) = (self.v(), self.dim);
        let (e_off, w_off, b_off) = (0, v * d, 2 * v * d);
        let mut g = vec![0.0; self.params.len()];
        for pair in seq.ids().windows(2) {
            let (prev, next) = (pair[0] as usize, pair[1] as usize);
            // d log p(next) / dz = onehot(next) - softmax(z)
            let mut dz: Vec<f64> = self.log_probs(prev).iter().map(|lp| -libm::exp(*lp)).collect();
            dz[next] += 1.0;
            for j in 0..v {
                g[b_off + j] += dz[j];
            }
            for k in 0..d {
                let e = self.params[e_off + prev * d + k];
                let mut de = 0.0;
                for j in 0..v {
                    g[w_off + k * v + j] += e * dz[j];
                    de += self.params[w_off + k * v + j] * dz[j];
                }
                g[e_off + prev * d + k] += de;
            }
        }
        let n = seq.predicted() as f64;
        g.iter_mut().for_each(|x| *x /= n);
        Ok(GradVector(g))
    }

    /// Central finite-difference gradient, for checking [`Self::grad`].
    pub fn numeric_grad(&self, text: &str, step: f64) -> Result<GradVector, GradError> {
        let mut out = Vec::with_capacity(self.params.len());
        let mut p = self.params.clone();
        for i in 0..p.len() {
            let orig = p[i];
            p[i] = orig + step;
            let up = self.with_params(p.clone()).log_likelihood(text)?;
            p[i] = orig - step;
            let down = self.with_params(p.clone()).log_likelihood(text)?;
            p[i] = orig;
            out.push((up - down) / (2.0 * step));
        }
        Ok(GradVector(out))
    }
}

/// `log p(test | θ + η·g(train)) - log p(test | θ)`, per token.
pub fn ced_one_step(model: &TinyLm, train_text: &str, test_text: &str, eta: f64) -> Result<f64, GradError> {
    if !(eta >= 0.0 && eta.is_finite()) {
        return Err(GradError::InvalidStep(eta));
    }
    let g = model.grad(train_text)?;
    let stepped: Vec<f64> = model.params.iter().zip(&g.0).map(|(p, d)| p + eta * d).collect();
    let after = model.with_params(stepped).log_likelihood(test_text)?;
    let before = model.log_likelihood(test_text)?;
    let diff = after - before;
    if !diff.is_finite() {
        return Err(GradError::NonFinite);
    }
    Ok(diff)
}

/// Largest componentwise relative error; magnitudes below `floor` are treated as `floor`.
pub fn max_relative_error(a: &GradVector, b: &GradVector, floor: f64) -> f64 {
    a.0.iter()
        .zip(&b.0)
        .map(|(x, y)| libm::fabs(x - y) / libm::fabs(*x).max(libm::fabs(*y)).max(floor))
        .fold(0.0, f64::max)
}

/// Above this mean relative first-order error the step is not small enough
/// for the linear approximation.
pub const FIRST_ORDER_TOLERANCE: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentStats {
    pub eta: f64,
    pub n: usize,
    pub spearman: f64,
    pub pearson: f64,
    /// Fraction of pairs where the step's effect and the dot product share a sign.
    pub sign_agreement: f64,
    /// Mean of `|ced - η·dot| / (η·|g_train|·|g_test| + ε)`.
    pub first_order_error: f64,
    pub first_order_regime: bool,
}

pub fn alignment_correlation(
    model: &TinyLm,
    train_texts: &[&str],
    test_text: &str,
    eta: f64,
) -> Result<AlignmentStats, GradError> {
    if train_texts.len() < 10 {
        return Err(GradError::TooFewTexts(train_texts.len()));
    }
    let g_test = model.grad(test_text)?;
    let mut steps = Vec::with_capacity(train_texts.len());
    let mut dots = Vec::with_capacity(train_texts.len());
    let mut err = 0.0;
    let mut agree = 0;
    for t in train_texts {
        let g_train = model.grad(t)?;
        let ced = ced_one_step(model, t, test_text, eta)?;
        let dot = g_train.dot(&g_test);
        err += libm::fabs(ced - eta * dot) / (eta * g_train.norm() * g_test.norm() + 1e-300);
        if (ced > 0.0) == (dot > 0.0) {
            agree += 1;
        }
        steps.push(ced);
        dots.push(dot);
    }
    let n = train_texts.len();
    let spearman = spearman(&steps, &dots).ok_or(GradError::DegenerateVariance)?;
    let pearson = pearson(&steps, &dots).ok_or(GradError::DegenerateVariance)?;
    let first_order_error = err / n as f64;
    Ok(AlignmentStats {
        eta,
        n,
        spearman,
        pearson,
        sign_agreement: agree as f64 / n as f64,
        first_order_error,
        first_order_regime: first_order_error <= FIRST_ORDER_TOLERANCE,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckConfig {
    pub vocab_words: usize,
    pub dim: usize,
    pub init_scale: f64,
    pub train_texts: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub etas: Vec<f64>,
    /// Step at which the rank-correlation claim is checked.
    pub eta: f64,
    pub fd_step: f64,
    pub seed: u64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig {
            vocab_words: 12,
            dim: 4,
            init_scale: 0.5,
            train_texts: 100,
            min_len: 3,
            max_len: 8,
            etas: vec![1e-3, 1e-4, 1e-5],
            eta: 1e-4,
            fd_step: 1e-5,
            seed: 0,
        }
    }
}

pub const FD_TOLERANCE: f64 = 1e-4;
pub const SPEARMAN_THRESHOLD: f64 = 0.9;
pub const SIGN_AGREEMENT_THRESHOLD: f64 = 0.99;
const FD_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub config: GradcheckConfig,
    pub fd_max_relative_error: f64,
    pub fd_pass: bool,
    pub alignment: AlignmentStats,
    pub spearman_pass: bool,
    pub sign_agreement_pass: bool,
    /// Alignment statistics at each step in `config.etas`.
    pub sweep: Vec<AlignmentStats>,
    /// First-order error shrinks as η decreases across the sweep.
    pub sweep_decreasing: bool,
    pub pass: bool,
}

/// Random texts over the words `w0 .. w{vocab_words-1}`.
pub fn random_texts<R: Rng>(rng: &mut R, vocab_words: usize, n: usize, min_len: usize, max_len: usize) -> Vec<String> {
    (0..n)
        .map(|_| {
            let len = rng.random_range(min_len..=max_len);
            let words: Vec<String> = (0..len).map(|_| format!("w{}", rng.random_range(0..vocab_words))).collect();
            words.join(" ")
        })
        .collect()
}

pub fn run_gradcheck(cfg: &GradcheckConfig) -> Result<GradcheckReport, GradError> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let words: Vec<String> = (0..cfg.vocab_words).map(|i| format!("w{i}")).collect();
    let vocab = Vocabulary::from(words);
    let model = TinyLm::random(vocab, cfg.dim, cfg.init_scale, rng.random());
    let train = random_texts(&mut rng, cfg.vocab_words, cfg.train_texts, cfg.min_len, cfg.max_len);
    let test = random_texts(&mut rng, cfg.vocab_words, 1, cfg.min_len, cfg.max_len).remove(0);
    let train: Vec<&str> = train.iter().map(String::as_str).collect();

    let mut fd_err: f64 = 0.0;
    for t in train.iter().take(5).chain(core::iter::once(&test.as_str())) {
        let exact = model.grad(t)?;
        let numeric = model.numeric_grad(t, cfg.fd_step)?;
        fd_err = fd_err.max(max_relative_error(&exact, &numeric, FD_FLOOR));
    }

    let alignment = alignment_correlation(&model, &train, &test, cfg.eta)?;
    let mut sweep = Vec::new();
    for &eta in &cfg.etas {
        sweep.push(alignment_correlation(&model, &train, &test, eta)?);
    }
    let mut by_eta: Vec<&AlignmentStats> = sweep.iter().collect();
    by_eta.sort_by(|a, b| b.eta.total_cmp(&a.eta));
    let sweep_decreasing = by_eta.windows(2).all(|w| w[1].first_order_error < w[0].first_order_error);

    let fd_pass = fd_err < FD_TOLERANCE;
    let spearman_pass = alignment.spearman >= SPEARMAN_THRESHOLD;
    let sign_agreement_pass = alignment.sign_agreement >= SIGN_AGREEMENT_THRESHOLD;
    Ok(GradcheckReport {
        config: cfg.clone(),
        fd_max_relative_error: fd_err,
        fd_pass,
        pass: fd_pass && spearman_pass && sign_agreement_pass && sweep_decreasing,
        alignment,
        spearman_pass,
        sign_agreement_pass,
        sweep,
        sweep_decreasing,
    })
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum GradError {
    #[error("text contains no tokens")]
    EmptyText,
    #[error("step size must be finite and non-negative, got {0}")]
    InvalidStep(f64),
    #[error("log-likelihood became non-finite")]
    NonFinite,
    #[error("need at least 10 training texts, got {0}")]
    TooFewTexts(usize),
    #[error("values have zero variance; correlation undefined")]
    DegenerateVariance,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab() -> Vocabulary {
        Vocabulary::from(vec![String::from("a"), String::from("b"), String::from("c")])
    }

    #[test]
    fn uniform_init_gradient_is_closed_form() {
        let m = TinyLm::zeros(vocab(), 2);
        let g = m.grad("a").unwrap();
        let v = m.vocab().len();
        let a = m.vocab().id("a") as usize;
        let eos = crate::tokenize::EOS as usize;
        let b_off = 2 * v * 2;
        // mean over the two predicted tokens (a, </s>) of onehot - 1/V
        for j in 0..v {
            let mut expected = -1.0 / v as f64;
            if j == a || j == eos {
                expected += 0.5;
            }
            assert!((g.0[b_off + j] - expected).abs() < 1e-15);
        }
        assert!(g.0[..b_off].iter().all(|&x| x == 0.0));
    }

    #[test]
    fn analytic_matches_finite_differences() {
        let m = TinyLm::random(vocab(), 3, 0.7, 11);
        for text in ["a b c", "c c a b", "b"] {
            let exact = m.grad(text).unwrap();
            let numeric = m.numeric_grad(text, 1e-5).unwrap();
            assert!(max_relative_error(&exact, &numeric, FD_FLOOR) < 1e-4);
        }
    }

    #[test]
    fn bos_is_never_predicted() {
        // the only predicted tokens of "a" are a and </s>, each after its predecessor
        let m = TinyLm::random(vocab(), 2, 0.5, 3);
        let lp = |prev: u32, next: u32| m.log_probs(prev as usize)[next as usize];
        let a = m.vocab().id("a");
        let expected = (lp(crate::tokenize::BOS, a) + lp(a, crate::tokenize::EOS)) / 2.0;
        assert!((m.log_likelihood("a").unwrap() - expected).abs() < 1e-15);
    }

    #[test]
    fn step_effects() {
        let m = TinyLm::random(vocab(), 3, 0.5, 5);
        assert_eq!(ced_one_step(&m, "a b", "c a", 0.0).unwrap(), 0.0);
        assert!(ced_one_step(&m, "a b c", "a b c", 1e-3).unwrap() > 0.0);
        assert!(matches!(ced_one_step(&m, "a", "b", -1.0), Err(GradError::InvalidStep(_))));
        assert_eq!(m.grad("").unwrap_err(), GradError::EmptyText);
    }

    #[test]
    fn swap_changes_value_not_dot() {
        let m = TinyLm::random(vocab(), 3, 0.5, 9);
        let (x, y) = ("a b b c", "c a");
        let gx = m.grad(x).unwrap();
        let gy = m.grad(y).unwrap();
        assert_eq!(gx.dot(&gy), gy.dot(&gx));
        let fwd = ced_one_step(&m, x, y, 1e-2).unwrap();
        let back = ced_one_step(&m, y, x, 1e-2).unwrap();
        assert_ne!(fwd, back);
    }

    #[test]
    fn duplicated_texts_and_degenerate_cases() {
        let m = TinyLm::random(vocab(), 3, 0.5, 2);
        let mut texts = vec!["a b"; 5];
        texts.extend(vec!["c c"; 5]);
        let s = alignment_correlation(&m, &texts, "a c", 1e-4).unwrap();
        assert!(s.spearman.is_finite());
        let same = vec!["a b"; 10];
        assert_eq!(
            alignment_correlation(&m, &same, "a c", 1e-4),
            Err(GradError::DegenerateVariance)
        );
        assert_eq!(
            alignment_correlation(&m, &same[..3], "a c", 1e-4),
            Err(GradError::TooFewTexts(3))
        );
    }

    #[test]
    fn large_step_is_flagged() {
        let cfg = GradcheckConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let words: Vec<String> = (0..cfg.vocab_words).map(|i| format!("w{i}")).collect();
        let m = TinyLm::random(Vocabulary::from(words), cfg.dim, cfg.init_scale, 4);
        let texts = random_texts(&mut rng, cfg.vocab_words, 30, 3, 8);
        let texts: Vec<&str> = texts.iter().map(String::as_str).collect();
        let small = alignment_correlation(&m, &texts, "w1 w2 w3", 1e-4).unwrap();
        let large = alignment_correlation(&m, &texts, "w1 w2 w3", 1.0).unwrap();
        assert!(small.first_order_regime);
        assert!(!large.first_order_regime);
    }
}
