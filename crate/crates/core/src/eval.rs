//! Task metrics, oracles, rank and domain statistics, bootstrap dispersion,
//! and the evaluation report.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Example, Pool, Task};
use crate::lm::{cross_entropy, BaseModel, LanguageModel, LmError, TargetModel};
use crate::stats::Welford;
use crate::tokenize::Vocabulary;

// ---------------------------------------------------------------- metrics

/// Lowercases, replaces punctuation with spaces and collapses whitespace.
/// With `strip_articles`, also drops "a", "an" and "the".
pub fn normalize_answer(text: &str, strip_articles: bool) -> String {
    let mut cleaned = String::with_capacity(text.len());
    for ch in text.chars() {
        if ch.is_alphanumeric() {
            cleaned.extend(ch.to_lowercase());
        } else {
            cleaned.push(' ');
        }
    }
    let words: Vec<&str> = cleaned
        .split_whitespace()
        .filter(|w| !(strip_articles && matches!(*w, "a" | "an" | "the")))
        .collect();
    words.join(" ")
}

fn alias(word: &str) -> Option<&'static str> {
    match word {
        "yes" | "true" => Some("yes"),
        "no" | "false" => Some("no"),
        _ => None,
    }
}

/// Maps generated text to a label. Yes/no aliases are folded; for binary
/// tasks the first token is tried when the whole answer is not an alias.
pub fn verbalize(text: &str, task: Option<Task>) -> String {
    let norm = normalize_answer(text, false);
    if let Some(a) = alias(&norm) {
        return a.into();
    }
    if task == Some(Task::Binary) {
        if let Some(a) = norm.split(' ').next().and_then(alias) {
            return a.into();
        }
    }
    norm
}

pub fn metric_accuracy(pred: &str, gold: &str) -> f64 {
    accuracy_for(pred, gold, None)
}

fn accuracy_for(pred: &str, gold: &str, task: Option<Task>) -> f64 {
    if verbalize(pred, task) == verbalize(gold, task) {
        1.0
    } else {
        0.0
    }
}

/// Token-overlap F1 over normalized whitespace tokens.
pub fn metric_token_f1(pred: &str, gold: &str) -> f64 {
    let p = normalize_answer(pred, false);
    let g = normalize_answer(gold, false);
    let p: Vec<&str> = p.split_whitespace().collect();
    let g: Vec<&str> = g.split_whitespace().collect();
    if p.is_empty() || g.is_empty() {
        return if p.is_empty() && g.is_empty() { 1.0 } else { 0.0 };
    }
    let mut counts: BTreeMap<&str, isize> = BTreeMap::new();
    for w in &g {
        *counts.entry(w).or_insert(0) += 1;
    }
    let mut common = 0usize;
    for w in &p {
        if let Some(c) = counts.get_mut(w) {
            if *c > 0 {
                *c -= 1;
                common += 1;
            }
        }
    }
    (2 * common) as f64 / (p.len() + g.len()) as f64
}

fn lcs_len(a: &[&str], b: &[&str]) -> usize {
    let mut prev = alloc::vec![0usize; b.len() + 1];
    let mut cur = alloc::vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        core::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// ROUGE-L F1 (β = 1) from the longest common token subsequence.
pub fn metric_rouge_l(pred: &str, gold: &str) -> f64 {
    let p = normalize_answer(pred, false);
    let g = normalize_answer(gold, false);
    let p: Vec<&str> = p.split_whitespace().collect();
    let g: Vec<&str> = g.split_whitespace().collect();
    if p.is_empty() || g.is_empty() {
        return if p.is_empty() && g.is_empty() { 1.0 } else { 0.0 };
    }
    (2 * lcs_len(&p, &g)) as f64 / (p.len() + g.len()) as f64
}

/// The metric a task is reported with.
pub fn task_metric(task: Task, pred: &str, gold: &str) -> f64 {
    match task {
        Task::Binary | Task::Multichoice => accuracy_for(pred, gold, Some(task)),
        Task::ExtractiveQa => metric_token_f1(pred, gold),
        Task::AbstractiveQa => metric_rouge_l(pred, gold),
    }
}

// ---------------------------------------------------------------- prediction

pub const BINARY_ANSWERS: [&str; 2] = ["yes", "no"];

/// Answer among the candidates whose `input + answer` text has the lowest
/// cross-entropy under `model`; earlier candidates win ties. Candidates
/// default to the choices (multichoice) or yes/no (binary).
pub fn predict_by_likelihood<M: LanguageModel>(
    model: &M,
    vocab: &Vocabulary,
    test: &Example,
    candidates: Option<&[String]>,
) -> Result<String, EvalError> {
    let binary: Vec<String> = BINARY_ANSWERS.iter().map(|s| s.to_string()).collect();
    let options: &[String] = match (candidates, test.task) {
        (Some(c), _) if !c.is_empty() => c,
        (_, Task::Multichoice) => &test.choices,
        (_, Task::Binary) => &binary,
        _ => return Err(EvalError::NoCandidates(test.id.clone())),
    };
    let mut best: Option<(f64, &String)> = None;
    for opt in options {
        let ce = cross_entropy(model, &vocab.encode(&test.input_with_answer(opt)));
        if best.is_none_or(|(b, _)| ce < b) {
            best = Some((ce, opt));
        }
    }
    best.map(|(_, a)| a.clone())
        .ok_or_else(|| EvalError::NoCandidates(test.id.clone()))
}

/// Answer options for built-in prediction. Binary and multichoice tests use
/// their defaults (`None`); free-form tests choose among their gold answer and
/// the distinct answers of same-dataset candidates, sorted.
pub fn answer_options(pool: &Pool, test: &Example) -> Option<Vec<String>> {
    match test.task {
        Task::Binary | Task::Multichoice => None,
        Task::ExtractiveQa | Task::AbstractiveQa => {
            let mut opts: Vec<String> = pool
                .candidates()
                .filter(|c| c.dataset == test.dataset)
                .map(|c| c.answer.clone())
                .chain(core::iter::once(test.answer.clone()))
                .collect();
            opts.sort();
            opts.dedup();
            Some(opts)
        }
    }
}

/// Per-demo values for one test.
#[derive(Debug, Clone, PartialEq)]
pub struct DemoRow {
    /// Cross-entropy of the gold answer tokens, and the closing sentinel,
    /// given the test input, under each demo model.
    pub losses: Vec<f64>,
    /// Likelihood prediction under each demo model.
    pub predictions: Vec<String>,
    /// Task metric of each prediction against the gold answer.
    pub metrics: Vec<f64>,
}

/// Scores `test` under every demo model. Predictions equal
/// [`predict_by_likelihood`] on each bound model; base probabilities are
/// shared across models.
pub fn demo_row(
    base: &BaseModel,
    models: &[TargetModel],
    test: &Example,
    options: Option<&[String]>,
) -> Result<DemoRow, EvalError> {
    let binary: Vec<String> = BINARY_ANSWERS.iter().map(|s| s.to_string()).collect();
    let options: &[String] = match (options, test.task) {
        (Some(c), _) if !c.is_empty() => c,
        (_, Task::Multichoice) => &test.choices,
        (_, Task::Binary) => &binary,
        _ => return Err(EvalError::NoCandidates(test.id.clone())),
    };
    let encode = |text: &str| {
        let seq = base.encode(text);
        let probs = base.position_probs(&seq);
        (seq, probs)
    };
    let gold = encode(&test.full_text());
    // Input sequence is BOS, input tokens, EOS; the answer starts where EOS was.
    let answer_start = base.encode(&test.input_text()).ids().len() - 1;
    let opts: Vec<_> = options.iter().map(|o| encode(&test.input_with_answer(o))).collect();
    let mut row = DemoRow {
        losses: Vec::with_capacity(models.len()),
        predictions: Vec::with_capacity(models.len()),
        metrics: Vec::with_capacity(models.len()),
    };
    for m in models {
        m.bind(base)?;
        row.losses.push(m.suffix_cross_entropy_with(base, &gold.0, &gold.1, answer_start));
        let mut best: Option<(f64, usize)> = None;
        for (i, (seq, probs)) in opts.iter().enumerate() {
            let ce = m.cross_entropy_with(base, seq, probs);
            if best.is_none_or(|(b, _)| ce < b) {
                best = Some((ce, i));
            }
        }
        let pred = &options[best.map(|(_, i)| i).unwrap_or(0)];
        row.metrics.push(task_metric(test.task, pred, &test.answer));
        row.predictions.push(pred.clone());
    }
    Ok(row)
}

// ---------------------------------------------------------------- tables

/// Dense per-(test, candidate) values: losses or metric scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairTable {
    pub test_ids: Vec<String>,
    pub candidate_ids: Vec<String>,
    values: Vec<f64>,
}

impl PairTable {
    pub fn new(test_ids: Vec<String>, candidate_ids: Vec<String>, rows: Vec<Vec<f64>>) -> Result<Self, EvalError> {
        if candidate_ids.is_empty()
            || rows.len() != test_ids.len()
            || rows.iter().any(|r| r.len() != candidate_ids.len())
        {
            return Err(EvalError::IncompleteTable);
        }
        Ok(PairTable {
            test_ids,
            candidate_ids,
            values: rows.into_iter().flatten().collect(),
        })
    }

    pub fn row(&self, t: usize) -> &[f64] {
        let w = self.candidate_ids.len();
        &self.values[t * w..(t + 1) * w]
    }

    pub fn test_index(&self, id: &str) -> Option<usize> {
        self.test_ids.iter().position(|t| t == id)
    }

    pub fn candidate_index(&self, id: &str) -> Option<usize> {
        self.candidate_ids.iter().position(|c| c == id)
    }

    pub fn get(&self, test_id: &str, candidate_id: &str) -> Result<f64, EvalError> {
        let t = self
            .test_index(test_id)
            .ok_or_else(|| EvalError::UnknownId(test_id.into()))?;
        let c = self
            .candidate_index(candidate_id)
            .ok_or_else(|| EvalError::UnknownId(candidate_id.into()))?;
        Ok(self.row(t)[c])
    }

    /// Candidate indices of row `t`, best first. `higher_is_better` picks the
    /// direction; ties go to the smaller candidate id.
    pub fn ranking(&self, t: usize, higher_is_better: bool) -> Vec<usize> {
        let row = self.row(t);
        let mut order: Vec<usize> = (0..row.len()).collect();
        order.sort_by(|&a, &b| {
            let o = row[a].total_cmp(&row[b]);
            let o = if higher_is_better { o.reverse() } else { o };
            o.then_with(|| self.candidate_ids[a].cmp(&self.candidate_ids[b]))
        });
        order
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Selection {
    pub test_id: String,
    pub demo_id: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OracleMode {
    /// Lowest loss per test.
    Loss,
    /// Highest metric per test.
    Metric,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleResult {
    pub mode: OracleMode,
    pub selections: Vec<Selection>,
    /// The table's value at each selection.
    pub best: Vec<f64>,
    pub mean: f64,
}

pub fn oracle(table: &PairTable, mode: OracleMode) -> Result<OracleResult, EvalError> {
    if table.test_ids.is_empty() {
        return Err(EvalError::IncompleteTable);
    }
    let mut selections = Vec::with_capacity(table.test_ids.len());
    let mut best = Vec::with_capacity(table.test_ids.len());
    for (t, tid) in table.test_ids.iter().enumerate() {
        let c = table.ranking(t, mode == OracleMode::Metric)[0];
        selections.push(Selection {
            test_id: tid.clone(),
            demo_id: table.candidate_ids[c].clone(),
        });
        best.push(table.row(t)[c]);
    }
    let mean = best.iter().sum::<f64>() / best.len() as f64;
    Ok(OracleResult {
        mode,
        selections,
        best,
        mean,
    })
}

/// Metric value of each selection, in selection order.
pub fn selection_scores(metric: &PairTable, selections: &[Selection]) -> Result<Vec<f64>, EvalError> {
    selections.iter().map(|s| metric.get(&s.test_id, &s.demo_id)).collect()
}

// ---------------------------------------------------------------- rank / domain

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeans {
    pub per_dataset: BTreeMap<String, f64>,
    /// Unweighted mean over datasets.
    pub macro_avg: f64,
}

impl DatasetMeans {
    fn from_groups(groups: BTreeMap<String, Welford>) -> Self {
        let per_dataset: BTreeMap<String, f64> = groups.into_iter().map(|(k, w)| (k, w.mean())).collect();
        let macro_avg = if per_dataset.is_empty() {
            0.0
        } else {
            per_dataset.values().sum::<f64>() / per_dataset.len() as f64
        };
        DatasetMeans { per_dataset, macro_avg }
    }
}

fn dataset_of<'p>(pool: &'p Pool, id: &str) -> Result<&'p Example, EvalError> {
    pool.get(id).ok_or_else(|| EvalError::UnknownId(id.into()))
}

/// Groups per-test values by the test's dataset.
pub fn dataset_means(pool: &Pool, per_test: &[(String, f64)]) -> Result<DatasetMeans, EvalError> {
    let mut groups: BTreeMap<String, Welford> = BTreeMap::new();
    for (tid, v) in per_test {
        let ex = dataset_of(pool, tid)?;
        groups.entry(ex.dataset.clone()).or_default().push(*v);
    }
    Ok(DatasetMeans::from_groups(groups))
}

/// Mean position (0 = best) of each test's selection in the full ranking of
/// candidates by metric, best first.
pub fn avg_rank(selections: &[Selection], metric: &PairTable, pool: &Pool) -> Result<DatasetMeans, EvalError> {
    let by_test: BTreeMap<&str, &str> = selections
        .iter()
        .map(|s| (s.test_id.as_str(), s.demo_id.as_str()))
        .collect();
    let mut per_test = Vec::with_capacity(metric.test_ids.len());
    for (t, tid) in metric.test_ids.iter().enumerate() {
        let demo = by_test
            .get(tid.as_str())
            .ok_or_else(|| EvalError::MissingSelection(tid.clone()))?;
        let c = metric
            .candidate_index(demo)
            .ok_or_else(|| EvalError::UnknownId((*demo).into()))?;
        let pos = metric.ranking(t, true).iter().position(|&x| x == c).unwrap();
        per_test.push((tid.clone(), pos as f64));
    }
    dataset_means(pool, &per_test)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainStats {
    pub in_domain: DatasetMeans,
    pub in_task: DatasetMeans,
}

/// Share of selections drawn from the test's own dataset and own task.
pub fn domain_analysis(selections: &[Selection], pool: &Pool) -> Result<DomainStats, EvalError> {
    let mut dom: BTreeMap<String, Welford> = BTreeMap::new();
    let mut task: BTreeMap<String, Welford> = BTreeMap::new();
    for s in selections {
        let t = dataset_of(pool, &s.test_id)?;
        let d = dataset_of(pool, &s.demo_id)?;
        let flag = |b: bool| if b { 1.0 } else { 0.0 };
        dom.entry(t.dataset.clone()).or_default().push(flag(t.dataset == d.dataset));
        task.entry(t.dataset.clone()).or_default().push(flag(t.task == d.task));
    }
    Ok(DomainStats {
        in_domain: DatasetMeans::from_groups(dom),
        in_task: DatasetMeans::from_groups(task),
    })
}

// ---------------------------------------------------------------- bootstrap

/// Standard deviation of the mean across `resamples` bootstrap resamples.
pub fn bootstrap_std(scores: &[f64], resamples: usize, seed: u64) -> Result<f64, EvalError> {
    if scores.len() < 2 {
        return Err(EvalError::TooFewScores(scores.len()));
    }
    if resamples < 2 {
        return Err(EvalError::TooFewResamples(resamples));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = scores.len();
    let mut acc = Welford::default();
    for _ in 0..resamples {
        let mut sum = 0.0;
        for _ in 0..n {
            sum += scores[rng.random_range(0..n)];
        }
        acc.push(sum / n as f64);
    }
    Ok(acc.sample_std())
}

// ---------------------------------------------------------------- report

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Policy {
    Random,
    NearestNeighborFile,
    Ced,
    ClusterCed,
    OracleLoss,
    OracleMetric,
}

impl Policy {
    pub fn as_str(self) -> &'static str {
        match self {
            Policy::Random => "random",
            Policy::NearestNeighborFile => "nearest_neighbor_file",
            Policy::Ced => "ced",
            Policy::ClusterCed => "cluster_ced",
            Policy::OracleLoss => "oracle_loss",
            Policy::OracleMetric => "oracle_metric",
        }
    }

    pub fn parse(s: &str) -> Option<Policy> {
        [
            Policy::Random,
            Policy::NearestNeighborFile,
            Policy::Ced,
            Policy::ClusterCed,
            Policy::OracleLoss,
            Policy::OracleMetric,
        ]
        .into_iter()
        .find(|p| p.as_str() == s)
    }
}

/// A prediction produced by some policy, built-in or external.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prediction {
    pub test_id: String,
    pub policy: Policy,
    pub demo_id: Option<String>,
    pub answer: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyRow {
    pub policy: String,
    pub metric: DatasetMeans,
    /// Mean over all tests.
    pub micro_avg: f64,
    pub bootstrap_std: f64,
    pub avg_rank: Option<DatasetMeans>,
    pub domain: Option<DomainStats>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub datasets: Vec<String>,
    pub candidates: usize,
    pub tests: usize,
    pub bootstrap_resamples: usize,
    pub rows: Vec<PolicyRow>,
}

#[derive(Debug, Clone, Copy)]
pub struct BootstrapSpec {
    pub resamples: usize,
    pub seed: u64,
}

/// Row for a policy defined by per-test selections scored against `metric`.
pub fn selection_row(
    name: &str,
    selections: &[Selection],
    metric: &PairTable,
    pool: &Pool,
    boot: BootstrapSpec,
) -> Result<PolicyRow, EvalError> {
    let scores = selection_scores(metric, selections)?;
    let per_test: Vec<(String, f64)> = selections.iter().map(|s| s.test_id.clone()).zip(scores).collect();
    let mut row = score_row(name, &per_test, pool, boot)?;
    row.avg_rank = Some(avg_rank(selections, metric, pool)?);
    row.domain = Some(domain_analysis(selections, pool)?);
    Ok(row)
}

/// Row for a policy known only by per-test metric values.
pub fn score_row(name: &str, per_test: &[(String, f64)], pool: &Pool, boot: BootstrapSpec) -> Result<PolicyRow, EvalError> {
    let values: Vec<f64> = per_test.iter().map(|(_, v)| *v).collect();
    let micro_avg = crate::stats::mean(&values).ok_or(EvalError::TooFewScores(0))?;
    let bootstrap_std = if values.len() >= 2 {
        bootstrap_std(&values, boot.resamples, boot.seed)?
    } else {
        0.0
    };
    Ok(PolicyRow {
        policy: name.into(),
        metric: dataset_means(pool, per_test)?,
        micro_avg,
        bootstrap_std,
        avg_rank: None,
        domain: None,
    })
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EvalError {
    #[error("test {0:?} has no answer candidates; supply predictions externally")]
    NoCandidates(String),
    #[error("evaluation table is incomplete")]
    IncompleteTable,
    #[error("unknown id {0:?}")]
    UnknownId(String),
    #[error("no selection for test {0:?}")]
    MissingSelection(String),
    #[error("need at least 2 scores, got {0}")]
    TooFewScores(usize),
    #[error("need at least 2 resamples, got {0}")]
    TooFewResamples(usize),
    #[error(transparent)]
    Lm(#[from] LmError),
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Provenance, Split};
    use alloc::format;
    use alloc::vec;

    #[test]
    fn token_f1_hand_count() {
        assert_eq!(metric_token_f1("a b c", "b c d"), 2.0 / 3.0);
        assert_eq!(metric_token_f1("x", "y"), 0.0);
        assert_eq!(metric_token_f1("the cat", "The cat!"), 1.0);
    }

    #[test]
    fn identity_scores_one() {
        for s in ["yes", "Paris, France", "a long answer with many words"] {
            assert_eq!(metric_accuracy(s, s), 1.0);
            assert_eq!(metric_token_f1(s, s), 1.0);
            assert_eq!(metric_rouge_l(s, s), 1.0);
        }
    }

    #[test]
    fn verbalizer_folds_aliases() {
        assert_eq!(metric_accuracy("yes.", "Yes"), 1.0);
        assert_eq!(metric_accuracy("True", "yes"), 1.0);
        assert_eq!(metric_accuracy("no", "yes"), 0.0);
        assert_eq!(task_metric(Task::Binary, "No, it is not", "no"), 1.0);
        assert_eq!(task_metric(Task::Multichoice, "No, it is not", "no"), 0.0);
    }

    #[test]
    fn rouge_l_uses_subsequence() {
        // LCS of "a b c d" and "a c d e" is "a c d"
        assert_eq!(metric_rouge_l("a b c d", "a c d e"), 6.0 / 8.0);
        assert_eq!(metric_rouge_l("", "x"), 0.0);
    }

    #[test]
    fn squad_normalization_drops_articles() {
        assert_eq!(normalize_answer("The  Cat, a dog!", true), "cat dog");
        assert_eq!(normalize_answer("The  Cat, a dog!", false), "the cat a dog");
    }

    fn table() -> PairTable {
        PairTable::new(
            vec!["t1".into(), "t2".into()],
            vec!["c1".into(), "c2".into(), "c3".into()],
            vec![vec![0.2, 0.9, 0.9], vec![0.5, 0.1, 0.3]],
        )
        .unwrap()
    }

    #[test]
    fn oracle_modes() {
        let t = table();
        let m = oracle(&t, OracleMode::Metric).unwrap();
        assert_eq!(m.selections[0].demo_id, "c2");
        assert_eq!(m.selections[1].demo_id, "c1");
        assert!((m.mean - 0.7).abs() < 1e-12);
        let l = oracle(&t, OracleMode::Loss).unwrap();
        assert_eq!(l.selections[0].demo_id, "c1");
        assert_eq!(l.selections[1].demo_id, "c2");

        let single = PairTable::new(vec!["t".into()], vec!["c".into()], vec![vec![0.4]]).unwrap();
        assert_eq!(oracle(&single, OracleMode::Metric).unwrap().mean, 0.4);
        assert!(PairTable::new(vec!["t".into()], vec!["c".into()], vec![vec![]]).is_err());
    }

    fn pool() -> Pool {
        let mk = |id: &str, ds: &str, task: Task, split| Example {
            id: id.into(),
            dataset: ds.into(),
            task,
            background: String::new(),
            question: format!("q {id}"),
            choices: vec![],
            answer: "yes".into(),
            split,
        };
        Pool::new(
            vec![
                mk("c1", "boolq", Task::Binary, Split::Candidate),
                mk("c2", "npboolq", Task::Binary, Split::Candidate),
                mk("c3", "squad", Task::ExtractiveQa, Split::Candidate),
                mk("t1", "boolq", Task::Binary, Split::Test),
                mk("t2", "boolq", Task::Binary, Split::Test),
            ],
            Provenance {
                source: "mem".into(),
                seed: None,
            },
        )
        .unwrap()
    }

    fn sel(pairs: &[(&str, &str)]) -> Vec<Selection> {
        pairs
            .iter()
            .map(|(t, d)| Selection {
                test_id: (*t).into(),
                demo_id: (*d).into(),
            })
            .collect()
    }

    #[test]
    fn ranks_of_oracle_and_worst() {
        let t = table();
        let p = pool();
        let best = oracle(&t, OracleMode::Metric).unwrap().selections;
        assert_eq!(avg_rank(&best, &t, &p).unwrap().macro_avg, 0.0);
        let worst: Vec<Selection> = (0..2)
            .map(|i| Selection {
                test_id: t.test_ids[i].clone(),
                demo_id: t.candidate_ids[*t.ranking(i, true).last().unwrap()].clone(),
            })
            .collect();
        assert_eq!(avg_rank(&worst, &t, &p).unwrap().macro_avg, 2.0);
        assert_eq!(
            avg_rank(&best[..1], &t, &p),
            Err(EvalError::MissingSelection("t2".into()))
        );
    }

    #[test]
    fn domain_fractions() {
        let p = pool();
        let own = domain_analysis(&sel(&[("t1", "c1"), ("t2", "c1")]), &p).unwrap();
        assert_eq!((own.in_domain.macro_avg, own.in_task.macro_avg), (1.0, 1.0));
        let same_task = domain_analysis(&sel(&[("t1", "c2")]), &p).unwrap();
        assert_eq!((same_task.in_domain.macro_avg, same_task.in_task.macro_avg), (0.0, 1.0));
        let mixed = domain_analysis(&sel(&[("t1", "c3"), ("t2", "c1")]), &p).unwrap();
        assert_eq!((mixed.in_domain.macro_avg, mixed.in_task.macro_avg), (0.5, 0.5));
        assert!(domain_analysis(&sel(&[("t1", "zz")]), &p).is_err());
    }

    #[test]
    fn bootstrap_constant_and_errors() {
        assert_eq!(bootstrap_std(&[0.7; 20], 1000, 1).unwrap(), 0.0);
        assert_eq!(bootstrap_std(&[1.0], 1000, 1), Err(EvalError::TooFewScores(1)));
        let xs: Vec<f64> = (0..30).map(|i| (i % 3) as f64).collect();
        assert_eq!(bootstrap_std(&xs, 500, 9).unwrap(), bootstrap_std(&xs, 500, 9).unwrap());
    }

    #[test]
    fn predict_requires_candidates_for_free_form() {
        struct Flat;
        impl LanguageModel for Flat {
            fn vocab_size(&self) -> usize {
                10
            }
            fn prob(&self, _: &[u32], _: u32) -> f64 {
                0.1
            }
        }
        let vocab = Vocabulary::build(["x"]);
        let mut ex = pool().get("c3").unwrap().clone();
        assert_eq!(
            predict_by_likelihood(&Flat, &vocab, &ex, None),
            Err(EvalError::NoCandidates("c3".into()))
        );
        ex.task = Task::Multichoice;
        ex.choices = vec!["same".into(), "same".into()];
        ex.answer = "same".into();
        assert_eq!(predict_by_likelihood(&Flat, &vocab, &ex, None).unwrap(), "same");
        let gold = vec![String::from("gold"), String::from("other")];
        // under a flat model all options tie; the first wins
        assert_eq!(predict_by_likelihood(&Flat, &vocab, &ex, Some(&gold)).unwrap(), "gold");
    }

    #[test]
    fn demo_row_matches_per_model_prediction() {
        let texts = ["yes yes the sky is blue", "no the grass is red no", "maybe so"];
        let base = BaseModel::train(&texts, &[], crate::lm::LmSettings::default()).unwrap();
        let cfg = crate::lm::AdaptConfig::default();
        let models: Vec<TargetModel> = texts
            .iter()
            .enumerate()
            .map(|(i, t)| crate::lm::adapt_texts(&base, vec![format!("m{i}")], &[*t], &cfg).unwrap())
            .collect();
        let mut test = pool().get("t1").unwrap().clone();
        test.question = "is the sky blue".into();
        let row = demo_row(&base, &models, &test, None).unwrap();
        for (i, m) in models.iter().enumerate() {
            let bound = m.bind(&base).unwrap();
            let pred = predict_by_likelihood(&bound, base.vocab(), &test, None).unwrap();
            assert_eq!(row.predictions[i], pred);
            assert_eq!(row.metrics[i], task_metric(test.task, &pred, &test.answer));
            let ids = base.encode(&test.full_text()).ids().to_vec();
            let start = base.encode(&test.input_text()).ids().len() - 1;
            let answer: Vec<f64> = (start..ids.len()).map(|j| -libm::log(bound.prob(&ids[..j], ids[j]))).collect();
            assert_eq!(answer.len(), 2);
            let loss = answer.iter().sum::<f64>() / answer.len() as f64;
            assert!((row.losses[i] - loss).abs() < 1e-12);
        }
    }

    #[test]
    fn free_form_options_include_gold() {
        let p = pool();
        let mut t = p.get("c3").unwrap().clone();
        t.answer = "zzz".into();
        assert_eq!(answer_options(&p, &t).unwrap(), vec![String::from("yes"), String::from("zzz")]);
        assert_eq!(answer_options(&p, p.get("t1").unwrap()), None);
    }
}
