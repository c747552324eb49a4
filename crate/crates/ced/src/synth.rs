//! Synthetic mixed-domain pools. Each domain draws most tokens from its own
//! vocabulary, disjoint from every other domain, plus a shared set of
//! function words.

use ced_core::{Example, Split, Task};
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

const PREFIXES: [&str; 8] = ["astra", "bota", "chemo", "derma", "econo", "filmo", "geolo", "histo"];
const SYLLABLES: [&str; 24] = [
    "ba", "ce", "di", "fo", "gu", "ha", "ji", "ko", "lu", "ma", "ne", "pi", "qo", "ru", "sa", "te",
    "vi", "wo", "xu", "ya", "ze", "bo", "ci", "du",
];
const FUNCTION_WORDS: [&str; 12] = ["the", "of", "and", "to", "in", "is", "that", "for", "on", "with", "as", "by"];
const TASKS: [Task; 4] = [Task::Binary, Task::Multichoice, Task::ExtractiveQa, Task::AbstractiveQa];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    /// Between 1 and 8; dataset `i` uses task `i mod 4`.
    pub domains: usize,
    pub candidates: usize,
    pub dev: usize,
    pub tests: usize,
    /// Probability that a token comes from the domain vocabulary.
    pub domain_rate: f64,
    pub background_len: (usize, usize),
    pub question_len: (usize, usize),
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            domains: 4,
            candidates: 32,
            dev: 4,
            tests: 50,
            domain_rate: 0.7,
            background_len: (12, 24),
            question_len: (5, 9),
            seed: 0,
        }
    }
}

pub fn domain_words(domain: usize) -> Vec<String> {
    SYLLABLES.iter().map(|s| format!("{}{s}", PREFIXES[domain])).collect()
}

pub fn dataset_name(domain: usize) -> String {
    format!("synth_{}", PREFIXES[domain])
}

struct Domain {
    name: String,
    task: Task,
    words: Vec<String>,
    /// Majority answer of a binary domain.
    lean_yes: bool,
}

impl Domain {
    fn sentence(&self, rng: &mut impl Rng, len: usize, rate: f64) -> Vec<String> {
        (0..len)
            .map(|_| {
                if rng.random_bool(rate) {
                    self.words.choose(rng).expect("non-empty").clone()
                } else {
                    FUNCTION_WORDS.choose(rng).expect("non-empty").to_string()
                }
            })
            .collect()
    }

    fn example(&self, cfg: &SynthConfig, rng: &mut impl Rng, split: Split, index: usize) -> Example {
        let bg_len = rng.random_range(cfg.background_len.0..=cfg.background_len.1);
        let q_len = rng.random_range(cfg.question_len.0..=cfg.question_len.1);
        let bg = self.sentence(rng, bg_len, cfg.domain_rate);
        let mut question = self.sentence(rng, q_len, cfg.domain_rate).join(" ");
        question.push_str(" ?");
        let mut choices = Vec::new();
        let answer = match self.task {
            Task::Binary => {
                let yes = rng.random_bool(if self.lean_yes { 0.8 } else { 0.2 });
                if yes { "yes" } else { "no" }.to_string()
            }
            Task::Multichoice => {
                let picks: Vec<&String> = self.words.choose_multiple(rng, 3).collect();
                choices = picks.iter().map(|w| w.to_string()).collect();
                choices[rng.random_range(0..choices.len())].clone()
            }
            Task::ExtractiveQa => {
                let start = rng.random_range(0..bg.len() - 1);
                bg[start..start + 2].join(" ")
            }
            Task::AbstractiveQa => {
                let len = rng.random_range(3..=5);
                self.sentence(rng, len, 1.0).join(" ")
            }
        };
        let tag = match split {
            Split::Candidate => "cand",
            Split::Dev => "dev",
            Split::Test => "test",
        };
        Example {
            id: format!("{}-{tag}-{index:03}", self.name),
            dataset: self.name.clone(),
            task: self.task,
            background: bg.join(" "),
            question,
            choices,
            answer,
            split,
        }
    }
}

/// Deterministic pool: for each domain, candidates then dev then tests.
pub fn generate(cfg: &SynthConfig) -> Vec<Example> {
    assert!((1..=PREFIXES.len()).contains(&cfg.domains), "1 to 8 domains");
    assert!(cfg.background_len.0 >= 2 && cfg.background_len.0 <= cfg.background_len.1);
    assert!(cfg.question_len.0 >= 1 && cfg.question_len.0 <= cfg.question_len.1);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut out = Vec::new();
    for d in 0..cfg.domains {
        let domain = Domain {
            name: dataset_name(d),
            task: TASKS[d % TASKS.len()],
            words: domain_words(d),
            lean_yes: d % 8 == 0,
        };
        for (split, n) in [(Split::Candidate, cfg.candidates), (Split::Dev, cfg.dev), (Split::Test, cfg.tests)] {
            for i in 0..n {
                out.push(domain.example(cfg, &mut rng, split, i));
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ced_core::corpus::Provenance;
    use ced_core::Pool;
    use std::collections::BTreeSet;

    #[test]
    fn valid_and_deterministic() {
        let cfg = SynthConfig { domains: 8, ..Default::default() };
        let a = generate(&cfg);
        assert_eq!(a, generate(&cfg));
        let pool = Pool::new(a, Provenance { source: "synth".into(), seed: Some(0) }).unwrap();
        assert_eq!(pool.candidate_counts().values().copied().collect::<Vec<_>>(), vec![32; 8]);
        let tasks: BTreeSet<Task> = pool.examples().iter().map(|e| e.task).collect();
        assert_eq!(tasks.len(), 4);
    }

    #[test]
    fn domain_vocabularies_are_disjoint() {
        let all: Vec<BTreeSet<String>> = (0..8).map(|d| domain_words(d).into_iter().collect()).collect();
        for i in 0..8 {
            assert!(all[i].iter().all(|w| !FUNCTION_WORDS.contains(&w.as_str())));
            for j in i + 1..8 {
                assert!(all[i].is_disjoint(&all[j]));
            }
        }
    }
}
