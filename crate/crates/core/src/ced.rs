//! Cross-entropy difference scores, the test × candidate matrix, and
//! demonstration selection.
//!
//! `ced = target_ce - base_ce`, both in nats per token over the unlabeled test
//! input. For a fixed test row the base term is constant, so ranking by
//! `target_ce` and by `ced` agree; rankings use `target_ce` directly.

use alloc::collections::BTreeSet;
use alloc::string::String;
use alloc::vec::Vec;
use core::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::corpus::Example;
use crate::lm::{cross_entropy, BaseModel, LmError, TargetModel};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CedScore {
    pub test_id: String,
    pub candidate_id: String,
    pub base_ce: f64,
    pub target_ce: f64,
    pub ced: f64,
}

/// One matrix cell.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub base_ce: f64,
    pub target_ce: f64,
    pub ced: f64,
}

impl Cell {
    pub fn new(base_ce: f64, target_ce: f64) -> Self {
        Cell {
            base_ce,
            target_ce,
            ced: target_ce - base_ce,
        }
    }
}

/// Scores one test input under a base model and one target model.
pub fn score_pair(base: &BaseModel, target: &TargetModel, test: &Example) -> Result<CedScore, LmError> {
    let adapted = target.bind(base)?;
    let seq = base.encode(&test.input_text());
    let cell = Cell::new(cross_entropy(base, &seq), cross_entropy(&adapted, &seq));
    Ok(CedScore {
        test_id: test.id.clone(),
        candidate_id: target.name.clone(),
        base_ce: cell.base_ce,
        target_ce: cell.target_ce,
        ced: cell.ced,
    })
}

/// Scores one test input under every target; base probabilities are computed
/// once for the row. Values are bitwise equal to [`score_pair`].
pub fn score_row(base: &BaseModel, targets: &[TargetModel], test: &Example) -> Result<Vec<Cell>, CedError> {
    let seq = base.encode(&test.input_text());
    let probs = base.position_probs(&seq);
    let base_ce = cross_entropy(base, &seq);
    targets
        .iter()
        .map(|t| {
            t.bind(base).map_err(|source| CedError::Pair {
                test_id: test.id.clone(),
                candidate_id: t.name.clone(),
                source,
            })?;
            Ok(Cell::new(base_ce, t.cross_entropy_with(base, &seq, &probs)))
        })
        .collect()
}

/// Dense row-major grid of scores, one row per test and one column per
/// candidate model.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMatrix {
    test_ids: Vec<String>,
    candidate_ids: Vec<String>,
    cells: Vec<Cell>,
}

fn check_unique(ids: &[String], what: &'static str) -> Result<(), CedError> {
    let mut seen = BTreeSet::new();
    for id in ids {
        if !seen.insert(id.as_str()) {
            return Err(CedError::DuplicateId { what, id: id.clone() });
        }
    }
    Ok(())
}

impl ScoreMatrix {
    /// Builds from `(base_ce, target_ce)` rows; `ced` is recomputed.
    pub fn new(
        test_ids: Vec<String>,
        candidate_ids: Vec<String>,
        rows: Vec<Vec<Cell>>,
    ) -> Result<Self, CedError> {
        check_unique(&test_ids, "test")?;
        check_unique(&candidate_ids, "candidate")?;
        if candidate_ids.is_empty() {
            return Err(CedError::NoCandidates);
        }
        if rows.len() != test_ids.len() || rows.iter().any(|r| r.len() != candidate_ids.len()) {
            return Err(CedError::Incomplete {
                expected: test_ids.len() * candidate_ids.len(),
                found: rows.iter().map(Vec::len).sum(),
            });
        }
        let mut cells = Vec::with_capacity(test_ids.len() * candidate_ids.len());
        for (row, tid) in rows.into_iter().zip(&test_ids) {
            for (c, cid) in row.into_iter().zip(&candidate_ids) {
                if !(c.base_ce.is_finite() && c.target_ce.is_finite()) {
                    return Err(CedError::NonFinite {
                        test_id: tid.clone(),
                        candidate_id: cid.clone(),
                    });
                }
                cells.push(Cell::new(c.base_ce, c.target_ce));
            }
        }
        Ok(ScoreMatrix {
            test_ids,
            candidate_ids,
            cells,
        })
    }

    /// Assembles from individual scores in any order. Row and column order
    /// follow first appearance; every pair must be present exactly once.
    pub fn from_scores(scores: impl IntoIterator<Item = CedScore>) -> Result<Self, CedError> {
        let scores: Vec<CedScore> = scores.into_iter().collect();
        let mut test_ids: Vec<String> = Vec::new();
        let mut cand_ids: Vec<String> = Vec::new();
        let mut t_index = alloc::collections::BTreeMap::new();
        let mut c_index = alloc::collections::BTreeMap::new();
        for s in &scores {
            if !t_index.contains_key(&s.test_id) {
                t_index.insert(s.test_id.clone(), test_ids.len());
                test_ids.push(s.test_id.clone());
            }
            if !c_index.contains_key(&s.candidate_id) {
                c_index.insert(s.candidate_id.clone(), cand_ids.len());
                cand_ids.push(s.candidate_id.clone());
            }
        }
        let mut grid: Vec<Option<Cell>> = alloc::vec![None; test_ids.len() * cand_ids.len()];
        for s in scores {
            let at = t_index[&s.test_id] * cand_ids.len() + c_index[&s.candidate_id];
            if grid[at].is_some() {
                return Err(CedError::DuplicatePair {
                    test_id: s.test_id,
                    candidate_id: s.candidate_id,
                });
            }
            grid[at] = Some(Cell::new(s.base_ce, s.target_ce));
        }
        let expected = grid.len();
        let found = grid.iter().filter(|c| c.is_some()).count();
        if found != expected {
            return Err(CedError::Incomplete { expected, found });
        }
        let width = cand_ids.len();
        let rows = grid
            .chunks(width.max(1))
            .map(|r| r.iter().map(|c| c.unwrap()).collect())
            .collect();
        ScoreMatrix::new(test_ids, cand_ids, rows)
    }

    pub fn test_ids(&self) -> &[String] {
        &self.test_ids
    }

    pub fn candidate_ids(&self) -> &[String] {
        &self.candidate_ids
    }

    /// Number of cells.
    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn row_index(&self, test_id: &str) -> Result<usize, CedError> {
        self.test_ids
            .iter()
            .position(|t| t == test_id)
            .ok_or_else(|| CedError::UnknownTest(test_id.into()))
    }

    pub fn row(&self, index: usize) -> &[Cell] {
        let w = self.candidate_ids.len();
        &self.cells[index * w..(index + 1) * w]
    }

    pub fn rows(&self) -> impl Iterator<Item = (&str, &[Cell])> {
        self.test_ids
            .iter()
            .map(String::as_str)
            .zip(self.cells.chunks(self.candidate_ids.len()))
    }

    pub fn get(&self, test: usize, candidate: usize) -> CedScore {
        let c = self.row(test)[candidate];
        CedScore {
            test_id: self.test_ids[test].clone(),
            candidate_id: self.candidate_ids[candidate].clone(),
            base_ce: c.base_ce,
            target_ce: c.target_ce,
            ced: c.ced,
        }
    }

    /// All entries in row-major order.
    pub fn scores(&self) -> impl Iterator<Item = CedScore> + '_ {
        (0..self.test_ids.len())
            .flat_map(move |t| (0..self.candidate_ids.len()).map(move |c| self.get(t, c)))
    }

    /// Column indices of a row ordered by `key`, ties by candidate id.
    pub fn argsort_by(&self, row: usize, key: impl Fn(&Cell) -> f64) -> Vec<usize> {
        let cells = self.row(row);
        let mut order: Vec<usize> = (0..cells.len()).collect();
        order.sort_by(|&a, &b| {
            key(&cells[a])
                .total_cmp(&key(&cells[b]))
                .then_with(|| self.candidate_ids[a].cmp(&self.candidate_ids[b]))
        });
        order
    }
}

/// Scores every test against every target, row by row.
pub fn score_matrix(
    base: &BaseModel,
    targets: &[TargetModel],
    tests: &[&Example],
) -> Result<ScoreMatrix, CedError> {
    if targets.is_empty() {
        return Err(CedError::NoCandidates);
    }
    let rows = tests
        .iter()
        .map(|t| score_row(base, targets, t))
        .collect::<Result<Vec<_>, _>>()?;
    ScoreMatrix::new(
        tests.iter().map(|t| t.id.clone()).collect(),
        targets.iter().map(|t| t.name.clone()).collect(),
        rows,
    )
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ranking {
    pub test_id: String,
    /// Ascending by target cross-entropy, ties by candidate id.
    pub candidates: Vec<String>,
}

fn cmp_cell(m: &ScoreMatrix, row: &[Cell], a: usize, b: usize) -> Ordering {
    row[a]
        .target_ce
        .total_cmp(&row[b].target_ce)
        .then_with(|| m.candidate_ids[a].cmp(&m.candidate_ids[b]))
}

/// The candidate whose target model assigns the test input the lowest
/// cross-entropy.
pub fn select<'m>(matrix: &'m ScoreMatrix, test_id: &str) -> Result<&'m str, CedError> {
    let r = matrix.row_index(test_id)?;
    let row = matrix.row(r);
    let best = (1..row.len()).fold(0, |best, c| {
        if cmp_cell(matrix, row, c, best) == Ordering::Less {
            c
        } else {
            best
        }
    });
    Ok(&matrix.candidate_ids[best])
}

pub fn rank(matrix: &ScoreMatrix, test_id: &str) -> Result<Ranking, CedError> {
    let r = matrix.row_index(test_id)?;
    let order = matrix.argsort_by(r, |c| c.target_ce);
    Ok(Ranking {
        test_id: test_id.into(),
        candidates: order.into_iter().map(|i| matrix.candidate_ids[i].clone()).collect(),
    })
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum CedError {
    #[error("scoring test {test_id:?} against candidate {candidate_id:?}: {source}")]
    Pair {
        test_id: String,
        candidate_id: String,
        source: LmError,
    },
    #[error("at least one candidate model is required")]
    NoCandidates,
    #[error("score matrix incomplete: {found} of {expected} entries")]
    Incomplete { expected: usize, found: usize },
    #[error("duplicate {what} id {id:?}")]
    DuplicateId { what: &'static str, id: String },
    #[error("pair ({test_id:?}, {candidate_id:?}) scored twice")]
    DuplicatePair { test_id: String, candidate_id: String },
    #[error("non-finite score for ({test_id:?}, {candidate_id:?})")]
    NonFinite { test_id: String, candidate_id: String },
    #[error("unknown test id {0:?}")]
    UnknownTest(String),
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::format;
    use alloc::vec;
    use crate::corpus::{Split, Task};
    use crate::lm::{adapt_texts, AdaptConfig, LmSettings};

    fn matrix(rows: Vec<Vec<f64>>) -> ScoreMatrix {
        let n = rows[0].len();
        ScoreMatrix::new(
            (0..rows.len()).map(|i| format!("t{i}")).collect(),
            (1..=n).map(|i| format!("c{i}")).collect(),
            rows.into_iter()
                .map(|r| r.into_iter().map(|v| Cell::new(3.0, v)).collect())
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn select_is_argmin_with_id_ties() {
        let m = matrix(vec![vec![2.0, 1.5, 1.9], vec![1.0, 1.0, 1.0]]);
        assert_eq!(select(&m, "t0").unwrap(), "c2");
        assert_eq!(select(&m, "t1").unwrap(), "c1");
        assert_eq!(rank(&m, "t0").unwrap().candidates, vec!["c2", "c3", "c1"]);
        assert_eq!(select(&m, "nope"), Err(CedError::UnknownTest("nope".into())));
    }

    #[test]
    fn ties_use_id_not_column_order() {
        let m = ScoreMatrix::new(
            vec!["t".into()],
            vec!["b".into(), "a".into()],
            vec![vec![Cell::new(0.0, 1.0), Cell::new(0.0, 1.0)]],
        )
        .unwrap();
        assert_eq!(select(&m, "t").unwrap(), "a");
    }

    #[test]
    fn incomplete_and_duplicate_inputs() {
        let s = |t: &str, c: &str| CedScore {
            test_id: t.into(),
            candidate_id: c.into(),
            base_ce: 1.0,
            target_ce: 0.5,
            ced: -0.5,
        };
        assert!(matches!(
            ScoreMatrix::from_scores([s("t1", "a"), s("t1", "b"), s("t2", "a")]),
            Err(CedError::Incomplete { expected: 4, found: 3 })
        ));
        assert!(matches!(
            ScoreMatrix::from_scores([s("t1", "a"), s("t1", "a")]),
            Err(CedError::DuplicatePair { .. })
        ));
        let m = ScoreMatrix::from_scores([s("t1", "a"), s("t2", "a")]).unwrap();
        assert_eq!(m.get(1, 0).ced, -0.5);
    }

    fn example(id: &str, bg: &str) -> Example {
        Example {
            id: id.into(),
            dataset: "d".into(),
            task: Task::ExtractiveQa,
            background: bg.into(),
            question: "what is it".into(),
            choices: vec![],
            answer: "it".into(),
            split: Split::Test,
        }
    }

    #[test]
    fn pair_scores() {
        let base = BaseModel::train(
            &["red green blue", "one two three", "red one blue two"],
            &[],
            LmSettings::default(),
        )
        .unwrap();
        let test = example("t", "red green blue green");
        let zero = AdaptConfig {
            lambda_grid: vec![0.0],
            ..AdaptConfig::default()
        };
        let flat = adapt_texts(&base, vec!["z".into()], &["one two"], &zero).unwrap();
        let s = score_pair(&base, &flat, &test).unwrap();
        assert_eq!(s.ced, 0.0);
        assert_eq!(s.base_ce, s.target_ce);

        let own =
            adapt_texts(&base, vec!["own".into()], &[&test.input_text()], &AdaptConfig::default()).unwrap();
        let s = score_pair(&base, &own, &test).unwrap();
        assert!(s.ced < 0.0);
        assert_eq!(s.ced, s.target_ce - s.base_ce);

        let m = score_matrix(&base, &[flat.clone(), own.clone()], &[&test]).unwrap();
        assert_eq!(m.get(0, 1), s);
        assert_eq!(select(&m, "t").unwrap(), "own");
    }
}
