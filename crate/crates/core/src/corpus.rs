//! Examples, candidate pools, stratified sampling and prompt assembly.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::tokenize::{token_count, tokens};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Binary,
    Multichoice,
    ExtractiveQa,
    AbstractiveQa,
}

impl Task {
    pub fn as_str(self) -> &'static str {
        match self {
            Task::Binary => "binary",
            Task::Multichoice => "multichoice",
            Task::ExtractiveQa => "extractive_qa",
            Task::AbstractiveQa => "abstractive_qa",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Candidate,
    Dev,
    Test,
}

/// One candidate, dev or test record.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub id: String,
    pub dataset: String,
    pub task: Task,
    #[serde(default)]
    pub background: String,
    pub question: String,
    #[serde(default)]
    pub choices: Vec<String>,
    pub answer: String,
    pub split: Split,
}

impl Example {
    pub fn validate(&self) -> Result<(), CorpusError> {
        let schema = |field: &'static str, reason: &str| CorpusError::Schema {
            id: self.id.clone(),
            field,
            reason: reason.to_string(),
        };
        if self.id.trim().is_empty() {
            return Err(schema("id", "must be non-empty"));
        }
        if self.question.trim().is_empty() {
            return Err(schema("question", "must be non-empty"));
        }
        if self.answer.trim().is_empty() {
            return Err(schema("answer", "must be non-empty"));
        }
        match (self.task, self.choices.is_empty()) {
            (Task::Multichoice, true) => {
                return Err(schema("choices", "multichoice requires choices"));
            }
            (Task::Multichoice, false) => {
                if !self.choices.contains(&self.answer) {
                    return Err(schema("answer", "must be one of the choices"));
                }
            }
            (_, false) => {
                return Err(schema("choices", "only multichoice examples carry choices"));
            }
            (_, true) => {}
        }
        Ok(())
    }

    /// The unlabeled input: background, question and choices.
    pub fn input_text(&self) -> String {
        let mut out = String::new();
        if !self.background.is_empty() {
            out.push_str(&self.background);
            out.push('\n');
        }
        out.push_str(&self.question);
        for choice in &self.choices {
            out.push('\n');
            out.push_str(choice);
        }
        out
    }

    /// Input followed by the answer; the text a target model is adapted on.
    pub fn full_text(&self) -> String {
        self.input_with_answer(&self.answer)
    }

    pub fn input_with_answer(&self, answer: &str) -> String {
        let mut out = self.input_text();
        out.push('\n');
        out.push_str(answer);
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub source: String,
    pub seed: Option<u64>,
}

/// Validated collection of examples with unique ids.
#[derive(Debug, Clone, PartialEq)]
pub struct Pool {
    examples: Vec<Example>,
    index: BTreeMap<String, usize>,
    pub provenance: Provenance,
}

impl Pool {
    pub fn new(examples: Vec<Example>, provenance: Provenance) -> Result<Self, CorpusError> {
        let mut index = BTreeMap::new();
        let mut dataset_task: BTreeMap<&str, Task> = BTreeMap::new();
        for (i, ex) in examples.iter().enumerate() {
            ex.validate()?;
            if index.insert(ex.id.clone(), i).is_some() {
                return Err(CorpusError::DuplicateId(ex.id.clone()));
            }
            match dataset_task.get(ex.dataset.as_str()) {
                Some(&task) if task != ex.task => {
                    return Err(CorpusError::MixedTask {
                        dataset: ex.dataset.clone(),
                        first: task,
                        second: ex.task,
                    });
                }
                Some(_) => {}
                None => {
                    dataset_task.insert(&ex.dataset, ex.task);
                }
            }
        }
        Ok(Pool {
            examples,
            index,
            provenance,
        })
    }

    pub fn examples(&self) -> &[Example] {
        &self.examples
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&Example> {
        self.index.get(id).map(|&i| &self.examples[i])
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &Example> {
        self.examples.iter().filter(move |e| e.split == split)
    }

    pub fn candidates(&self) -> impl Iterator<Item = &Example> {
        self.split(Split::Candidate)
    }

    /// Candidate counts keyed by dataset tag.
    pub fn candidate_counts(&self) -> BTreeMap<String, usize> {
        let mut counts = BTreeMap::new();
        for ex in self.candidates() {
            *counts.entry(ex.dataset.clone()).or_insert(0) += 1;
        }
        counts
    }

    pub fn into_examples(self) -> Vec<Example> {
        self.examples
    }
}

/// Keeps exactly `per_dataset` candidates from every dataset, drawn uniformly
/// without replacement. Dev and test examples pass through untouched.
pub fn sample_pool(pool: &Pool, per_dataset: usize, seed: u64) -> Result<Pool, CorpusError> {
    let mut by_dataset: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, ex) in pool.examples.iter().enumerate() {
        if ex.split == Split::Candidate {
            by_dataset.entry(&ex.dataset).or_default().push(i);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keep = alloc::vec![false; pool.examples.len()];
    for (dataset, idx) in &by_dataset {
        if idx.len() < per_dataset {
            return Err(CorpusError::Insufficient {
                dataset: dataset.to_string(),
                have: idx.len(),
                need: per_dataset,
            });
        }
        for pick in rand::seq::index::sample(&mut rng, idx.len(), per_dataset) {
            keep[idx[pick]] = true;
        }
    }
    let examples = pool
        .examples
        .iter()
        .enumerate()
        .filter(|(i, ex)| ex.split != Split::Candidate || keep[*i])
        .map(|(_, ex)| ex.clone())
        .collect();
    Pool::new(
        examples,
        Provenance {
            source: pool.provenance.source.clone(),
            seed: Some(seed),
        },
    )
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SectionLabels {
    pub background: String,
    pub question: String,
    pub answer: String,
    pub example: String,
}

impl Default for SectionLabels {
    fn default() -> Self {
        SectionLabels {
            background: "background:".into(),
            question: "question:".into(),
            answer: "answer:".into(),
            example: "example:".into(),
        }
    }
}

pub const DEFAULT_BINARY_INSTRUCTION: &str = "Answer the question with yes or no.";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptSpec {
    pub token_budget: usize,
    #[serde(default)]
    pub section_labels: SectionLabels,
    /// Overrides the built-in yes/no directive used for binary test examples.
    #[serde(default)]
    pub instruction: Option<String>,
}

impl Default for PromptSpec {
    fn default() -> Self {
        PromptSpec {
            token_budget: 512,
            section_labels: SectionLabels::default(),
            instruction: None,
        }
    }
}

impl PromptSpec {
    pub fn validate(&self) -> Result<(), CorpusError> {
        if self.token_budget == 0 {
            return Err(CorpusError::InvalidPromptSpec("token_budget must be positive"));
        }
        let l = &self.section_labels;
        for label in [&l.background, &l.question, &l.answer, &l.example] {
            if token_count(label) == 0 {
                return Err(CorpusError::InvalidPromptSpec("section labels must be non-empty"));
            }
        }
        Ok(())
    }
}

/// Prefix of `text` holding its first `keep` tokens.
fn token_prefix(text: &str, keep: usize) -> &str {
    if keep == 0 {
        return "";
    }
    let toks = tokens(text);
    match toks.get(keep - 1) {
        Some(t) if keep < toks.len() => &text[..t.span.end],
        _ => text,
    }
}

fn render_example(out: &mut String, ex: &Example, background: &str, labels: &SectionLabels) {
    if !ex.background.is_empty() {
        let _ = writeln!(out, "{} {}", labels.background, background);
    }
    let _ = writeln!(out, "{} {}", labels.question, ex.question);
    for (i, choice) in ex.choices.iter().enumerate() {
        let _ = writeln!(out, "({}) {}", choice_label(i), choice);
    }
}

fn choice_label(i: usize) -> char {
    char::from(b'a' + (i % 26) as u8)
}

fn render(
    demo: Option<(&Example, &str)>,
    test: &Example,
    test_background: &str,
    spec: &PromptSpec,
) -> String {
    let labels = &spec.section_labels;
    let mut out = String::new();
    if let Some((demo, bg)) = demo {
        let _ = writeln!(out, "{}", labels.example);
        render_example(&mut out, demo, bg, labels);
        let _ = writeln!(out, "{} {}", labels.answer, demo.answer);
        out.push('\n');
    }
    render_example(&mut out, test, test_background, labels);
    if test.task == Task::Binary {
        let instruction = spec.instruction.as_deref().unwrap_or(DEFAULT_BINARY_INSTRUCTION);
        let _ = writeln!(out, "{instruction}");
    }
    out.push_str(&labels.answer);
    out
}

/// Renders an optional demonstration followed by the test input within the
/// token budget. Only background sections shrink: the demonstration's tail is
/// cut first, then the test's.
pub fn assemble_prompt(
    demo: Option<&Example>,
    test: &Example,
    spec: &PromptSpec,
) -> Result<String, CorpusError> {
    spec.validate()?;
    let fixed = token_count(&render(demo.map(|d| (d, "")), test, "", spec));
    if fixed > spec.token_budget {
        return Err(CorpusError::BudgetTooSmall {
            required: fixed,
            budget: spec.token_budget,
        });
    }
    let available = spec.token_budget - fixed;
    let demo_bg = demo.map_or(0, |d| token_count(&d.background));
    let test_bg = token_count(&test.background);
    let excess = (demo_bg + test_bg).saturating_sub(available);
    let demo_cut = excess.min(demo_bg);
    let test_cut = excess - demo_cut;
    let demo = demo.map(|d| (d, token_prefix(&d.background, demo_bg - demo_cut)));
    let test_background = token_prefix(&test.background, test_bg - test_cut);
    Ok(render(demo, test, test_background, spec))
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum CorpusError {
    #[error("example {id:?}: field `{field}` {reason}")]
    Schema {
        id: String,
        field: &'static str,
        reason: String,
    },
    #[error("duplicate example id {0:?}")]
    DuplicateId(String),
    #[error("dataset {dataset:?} mixes tasks {} and {}", first.as_str(), second.as_str())]
    MixedTask {
        dataset: String,
        first: Task,
        second: Task,
    },
    #[error("dataset {dataset:?} has {have} candidates, {need} requested")]
    Insufficient {
        dataset: String,
        have: usize,
        need: usize,
    },
    #[error("invalid prompt spec: {0}")]
    InvalidPromptSpec(&'static str),
    #[error("prompt needs {required} tokens outside background sections, budget is {budget}")]
    BudgetTooSmall { required: usize, budget: usize },
}
